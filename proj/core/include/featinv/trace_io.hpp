#pragma once

#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "featinv/guidance.hpp"

namespace featinv {

/// Streams step records to a JSON-lines file as generation proceeds, so an
/// aborted run still leaves everything up to the failing step on disk.
class TraceWriter final : public GenerationObserver {
 public:
  explicit TraceWriter(const std::filesystem::path& path);
  void on_record(const StepRecord& rec) override;

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

std::vector<StepRecord> read_trace(const std::filesystem::path& path);

/// Summary numbers recoverable from a trace file alone.
struct TraceSummary {
  double best_distance = 0.0;
  StepIndex best_step;
  double final_distance = 0.0;
  bool has_final = false;
  std::size_t records = 0;
  std::int64_t flagged_steps = 0;
};

void to_json(nlohmann::json& j, const TraceSummary& s);

/// The first record with the minimum loss wins ties, as during generation.
/// Throws std::invalid_argument on an empty trace.
TraceSummary summarize_trace(const std::vector<StepRecord>& records);

/// Re-checks the gradient-fixing contracts on persisted records: the
/// normalized gradient has the norm of the predicted noise, and no clipped
/// entry exceeds clip_multiplier times the std of the normalized gradient.
struct ContractReport {
  std::size_t checked = 0;
  std::size_t norm_violations = 0;
  std::size_t clip_violations = 0;
  double worst_norm_rel_error = 0.0;
  double worst_clip_excess = 0.0;  // max(post_clip_max_abs - multiplier * std), <= 0 when satisfied

  bool ok() const { return norm_violations == 0 && clip_violations == 0; }
};

void to_json(nlohmann::json& j, const ContractReport& r);

ContractReport check_trace_contracts(const std::vector<StepRecord>& records, double clip_multiplier,
                                     double norm_rel_tol = 1e-6);

}  // namespace featinv
