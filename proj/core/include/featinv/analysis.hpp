#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "featinv/feature.hpp"

namespace featinv {

/// Pairwise squared Euclidean distances over a cohort of comparable features.
struct DistanceReport {
  std::string cohort_id;
  std::vector<std::vector<double>> pairwise;  // symmetric, zero diagonal
  double average_pairwise = 0.0;              // mean over the strict upper triangle
};

void to_json(nlohmann::json& j, const DistanceReport& r);

/// Requires at least two features sharing one extractor id.
DistanceReport pairwise_squared_distances(const std::vector<FeatureVector>& features,
                                          std::string cohort_id = "cohort");

double squared_distance(const FeatureVector& a, const FeatureVector& b);

/// Cosine of the angle between two features. Throws on a zero-norm input.
double cosine_similarity(const FeatureVector& a, const FeatureVector& b);

FeatureVector scale_feature(const FeatureVector& f, double s);

/// Rescales f to the given L2 norm, keeping its direction.
FeatureVector normalize_to_norm(const FeatureVector& f, double target_norm);

struct NormStatistics {
  double mean_norm = 0.0;
  std::vector<double> norms;
};

NormStatistics norm_statistics(const std::vector<FeatureVector>& features);

/// Five-number summary plus moments, used for sweep box plots.
struct SampleSummary {
  std::size_t count = 0;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
};

void to_json(nlohmann::json& j, const SampleSummary& s);

/// Quartiles use linear interpolation between order statistics.
SampleSummary summarize(std::vector<double> values);

}  // namespace featinv
