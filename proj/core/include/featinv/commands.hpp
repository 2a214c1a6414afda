#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "featinv/analysis.hpp"
#include "featinv/backbone.hpp"
#include "featinv/extractor.hpp"
#include "featinv/run_config.hpp"

namespace featinv {

/// Accepts an unset/empty value or "cpu"; this build has no other device.
/// Throws ConfigError otherwise.
void check_device(const char* env_value);

std::shared_ptr<FeatureExtractor> make_extractor(const ExtractorSpec& spec, const ImageShape& image_shape);

/// Applies a scale or normalize transform. Returns the input for "none".
FeatureVector apply_transform(const FeatureVector& f, const TargetTransform& transform);

struct ResolvedTarget {
  FeatureVector feature;
  nlohmann::json provenance;  // source, path, transform, resulting norm
};

ResolvedTarget resolve_target(const TargetSpec& spec, const FeatureExtractor& extractor);

/// Everything a batch of runs shares, loaded once.
struct Session {
  RunConfig config;
  std::shared_ptr<ToyBackbone> backbone;
  std::string backbone_digest;
  std::shared_ptr<FeatureExtractor> extractor;
  ResolvedTarget target;
};

/// Validates the config and loads the models and the target. Throws
/// ConfigError for unusable inputs.
Session open_session(const RunConfig& cfg);

struct RunOutcome {
  int index = 0;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  bool ok = false;
  std::string error;
  double best_distance = 0.0;
  double final_distance = 0.0;
  StepIndex best_step;
};

/// Runs `runs` independent generations into out_dir/run_000, run_001, ...
/// Run i is seeded with derive_seed(guidance.seed, i). Up to `workers` runs
/// proceed concurrently; a failing run is recorded and the others continue.
std::vector<RunOutcome> run_batch(const Session& session, const GuidanceConfig& guidance,
                                  const std::filesystem::path& out_dir, int runs, int workers,
                                  std::ostream* log = nullptr);

/// Returns 0 when every run finished, 1 otherwise.
int cmd_generate(const RunConfig& cfg, std::ostream& log);

struct SweepRow {
  std::string value;
  std::vector<double> best_distances;  // successful runs, in run order
  int failures = 0;
  bool has_summary = false;
  SampleSummary summary;
};

struct SweepReport {
  std::string parameter;
  std::vector<SweepRow> rows;
};

void to_json(nlohmann::json& j, const SweepReport& r);

/// Sets one sweep parameter ("w_g", "clip_multiplier" or "emphasis" with
/// values on/off) on a copy of `base`. "off" collapses the emphasized steps.
GuidanceConfig apply_sweep_value(GuidanceConfig base, const std::string& parameter, const std::string& value);

/// One batch per value under output_dir/<parameter>=<value>, plus
/// summary.csv and boxplot.json. Per-run failures do not stop the sweep.
SweepReport cmd_sweep(const RunConfig& cfg, const std::string& parameter, const std::vector<std::string>& values,
                      std::ostream& log);

struct EncodeOptions {
  ExtractorSpec extractor;
  std::vector<std::filesystem::path> inputs;  // .png images or .fvec features
  std::filesystem::path output_dir;
  TargetTransform transform;
  bool csv = false;
};

/// Writes one <stem>.fvec per input (and <stem>.csv on request). Image
/// inputs are encoded with the extractor; feature inputs are only
/// transformed. Returns the written feature paths.
std::vector<std::filesystem::path> cmd_encode(const EncodeOptions& opts);

std::vector<FeatureVector> read_features(const std::vector<std::filesystem::path>& paths);

/// Re-derives a run's summary numbers from its trace and compares them with
/// the stored summary.json; also re-checks the gradient contracts.
nlohmann::json analyze_run(const std::filesystem::path& run_dir);

}  // namespace featinv
