#include "featinv/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace featinv {

void to_json(nlohmann::json& j, const DistanceReport& r) {
  j = nlohmann::json{{"cohort_id", r.cohort_id}, {"average_pairwise", r.average_pairwise}, {"pairwise", r.pairwise}};
}

void to_json(nlohmann::json& j, const SampleSummary& s) {
  j = nlohmann::json{{"count", s.count}, {"mean", s.mean}, {"std", s.std},       {"min", s.min},
                     {"q1", s.q1},       {"median", s.median}, {"q3", s.q3}, {"max", s.max}};
}

double squared_distance(const FeatureVector& a, const FeatureVector& b) {
  a.require_comparable(b);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    sum += d * d;
  }
  return sum;
}

DistanceReport pairwise_squared_distances(const std::vector<FeatureVector>& features, std::string cohort_id) {
  if (features.size() < 2) throw std::invalid_argument("pairwise distances need at least two features");
  const std::size_t n = features.size();
  DistanceReport report;
  report.cohort_id = std::move(cohort_id);
  report.pairwise.assign(n, std::vector<double>(n, 0.0));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = squared_distance(features[i], features[j]);
      report.pairwise[i][j] = report.pairwise[j][i] = d;
      total += d;
    }
  }
  report.average_pairwise = total / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
  return report;
}

double cosine_similarity(const FeatureVector& a, const FeatureVector& b) {
  a.require_comparable(b);
  if (a.norm() == 0.0 || b.norm() == 0.0) throw std::invalid_argument("cosine similarity of a zero-norm feature");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) dot += a.values()[i] * b.values()[i];
  return std::clamp(dot / (a.norm() * b.norm()), -1.0, 1.0);
}

FeatureVector scale_feature(const FeatureVector& f, double s) {
  if (!std::isfinite(s)) throw std::invalid_argument("scale factor must be finite");
  std::vector<double> v = f.values();
  for (double& x : v) x *= s;
  return FeatureVector(std::move(v), f.extractor_id());
}

FeatureVector normalize_to_norm(const FeatureVector& f, double target_norm) {
  if (f.norm() == 0.0) throw std::invalid_argument("cannot normalize a zero-norm feature");
  if (!(target_norm > 0.0) || !std::isfinite(target_norm)) throw std::invalid_argument("target norm must be positive");
  return scale_feature(f, target_norm / f.norm());
}

NormStatistics norm_statistics(const std::vector<FeatureVector>& features) {
  if (features.empty()) throw std::invalid_argument("norm statistics need at least one feature");
  NormStatistics stats;
  double total = 0.0;
  for (const auto& f : features) {
    stats.norms.push_back(f.norm());
    total += f.norm();
  }
  stats.mean_norm = total / static_cast<double>(features.size());
  return stats;
}

SampleSummary summarize(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("cannot summarize an empty sample");
  std::sort(values.begin(), values.end());
  SampleSummary s;
  s.count = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.count);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(s.count));
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(s.count - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, s.count - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  s.min = values.front();
  s.q1 = quantile(0.25);
  s.median = quantile(0.5);
  s.q3 = quantile(0.75);
  s.max = values.back();
  return s;
}

}  // namespace featinv
