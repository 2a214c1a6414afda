#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "featinv/guidance.hpp"

namespace featinv {

struct ExtractorSpec {
  std::string kind = "analytic";  // "analytic" or "cnn"
  std::filesystem::path checkpoint;  // cnn only
  std::int64_t grid = 2;             // analytic only
};

/// Post-processing applied to the loaded target feature.
struct TargetTransform {
  std::string kind = "none";  // "none", "scale" or "normalize"
  double factor = 1.0;        // scale
  // normalize: either an explicit norm or the mean norm of reference features.
  std::optional<double> norm;
  std::vector<std::filesystem::path> reference;
};

struct TargetSpec {
  std::string source = "feature";  // "feature", "image" or "caption"
  std::filesystem::path path;
  TargetTransform transform;
};

/// Expected schedule parameters. When present they must agree with the
/// schedule stored in the backbone checkpoint.
struct ScheduleSpec {
  int steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
};

struct RunConfig {
  std::filesystem::path backbone;
  ExtractorSpec extractor;
  TargetSpec target;
  GuidanceConfig guidance;
  std::optional<ScheduleSpec> schedule;
  std::filesystem::path output_dir = "runs";
  int runs = 1;
  int workers = 1;

  /// Checks bounds and that every referenced file exists. Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& cfg);
/// Relative paths are kept as written; see load_run_config for resolution.
void from_json(const nlohmann::json& j, RunConfig& cfg);

/// Parses a JSON config file. Relative paths are resolved against the
/// directory holding the file. Throws ConfigError on any problem.
RunConfig load_run_config(const std::filesystem::path& path);

/// Resolves relative paths in `cfg` against `base`.
void resolve_paths(RunConfig& cfg, const std::filesystem::path& base);

}  // namespace featinv
