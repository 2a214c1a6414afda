#include "featinv/trace_io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "featinv/errors.hpp"

namespace featinv {

TraceWriter::TraceWriter(const std::filesystem::path& path) : out_(path), path_(path) {
  if (!out_) throw RunError("cannot open trace file " + path.string());
}

void TraceWriter::on_record(const StepRecord& rec) {
  out_ << nlohmann::json(rec).dump() << '\n';
  out_.flush();
  if (!out_) throw RunError("failed writing trace file " + path_.string());
}

std::vector<StepRecord> read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace file " + path.string());
  std::vector<StepRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      records.push_back(nlohmann::json::parse(line).get<StepRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

void to_json(nlohmann::json& j, const TraceSummary& s) {
  j = nlohmann::json{{"best_distance", s.best_distance},
                     {"best_step", {{"t", s.best_step.t}, {"k", s.best_step.k}}},
                     {"records", s.records},
                     {"flagged_steps", s.flagged_steps}};
  if (s.has_final) j["final_distance"] = s.final_distance;
}

TraceSummary summarize_trace(const std::vector<StepRecord>& records) {
  if (records.empty()) throw std::invalid_argument("cannot summarize an empty trace");
  TraceSummary s;
  s.records = records.size();
  s.best_distance = records.front().loss;
  s.best_step = {records.front().t, records.front().k};
  for (const auto& r : records) {
    if (r.loss < s.best_distance) {
      s.best_distance = r.loss;
      s.best_step = {r.t, r.k};
    }
    if (r.flagged()) ++s.flagged_steps;
    if (r.is_final) {
      s.has_final = true;
      s.final_distance = r.loss;
    }
  }
  return s;
}

void to_json(nlohmann::json& j, const ContractReport& r) {
  j = nlohmann::json{{"checked", r.checked},
                     {"norm_violations", r.norm_violations},
                     {"clip_violations", r.clip_violations},
                     {"worst_norm_rel_error", r.worst_norm_rel_error},
                     {"worst_clip_excess", r.worst_clip_excess},
                     {"ok", r.ok()}};
}

ContractReport check_trace_contracts(const std::vector<StepRecord>& records, double clip_multiplier,
                                     double norm_rel_tol) {
  ContractReport report;
  report.worst_clip_excess = -std::numeric_limits<double>::infinity();
  for (const auto& r : records) {
    // The final decode and zero-gradient steps carry no fixed gradient.
    if (r.is_final || r.zero_gradient) continue;
    ++report.checked;
    const double rel = std::abs(r.normalized_norm - r.eps_norm) / std::max(r.eps_norm, 1e-300);
    report.worst_norm_rel_error = std::max(report.worst_norm_rel_error, rel);
    if (!(rel <= norm_rel_tol)) ++report.norm_violations;
    const double bound = clip_multiplier * r.normalized_std;
    const double excess = r.post_clip_max_abs - bound;
    report.worst_clip_excess = std::max(report.worst_clip_excess, excess);
    if (!(excess <= 0.0)) ++report.clip_violations;
  }
  if (report.checked == 0) report.worst_clip_excess = 0.0;
  return report;
}

}  // namespace featinv
