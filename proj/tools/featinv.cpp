// featinv command line: datasets, model training, guided generation,
// sweeps, feature encoding and analysis reports.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "featinv/analysis.hpp"
#include "featinv/backbone.hpp"
#include "featinv/commands.hpp"
#include "featinv/dataset.hpp"
#include "featinv/errors.hpp"
#include "featinv/extractor.hpp"
#include "featinv/run_config.hpp"
#include "featinv/schedule.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace featinv;

namespace {

// Flags that mirror RunConfig fields. Unset flags leave the config file's
// value (or the default) in place.
struct RunFlags {
  std::string config;
  std::optional<std::string> backbone, extractor, extractor_checkpoint, target, target_source, output_dir;
  std::optional<std::int64_t> grid;
  std::optional<double> scale, normalize_norm;
  std::vector<std::string> normalize_reference;
  std::optional<double> w_g, clip;
  std::optional<int> k_early, k_late, t_prime, trace_every, runs, workers;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<double> beta_start, beta_end;

  void add_to(CLI::App* app) {
    app->add_option("-c,--config", config, "JSON run config");
    app->add_option("--backbone", backbone, "Backbone checkpoint");
    app->add_option("--extractor", extractor, "Extractor kind")->check(CLI::IsMember({"analytic", "cnn"}));
    app->add_option("--extractor-checkpoint", extractor_checkpoint, "CNN extractor checkpoint");
    app->add_option("--grid", grid, "Analytic extractor grid");
    app->add_option("--target", target, "Target feature, image or caption-feature file");
    app->add_option("--target-source", target_source, "How to read --target")
        ->check(CLI::IsMember({"feature", "image", "caption"}));
    app->add_option("--scale", scale, "Scale the target feature by this factor");
    app->add_option("--normalize-norm", normalize_norm, "Rescale the target to this L2 norm");
    app->add_option("--normalize-reference", normalize_reference,
                    "Rescale the target to the mean norm of these feature files");
    app->add_option("--w-g", w_g, "Gradient weight");
    app->add_option("--k-early", k_early, "Self-recurrence count for emphasized steps");
    app->add_option("--k-late", k_late, "Self-recurrence count for the other steps");
    app->add_option("--t-prime", t_prime, "Number of emphasized steps");
    app->add_option("--clip", clip, "Clip threshold in gradient standard deviations");
    app->add_option("--seed", seed, "Base seed");
    app->add_option("--trace-every", trace_every, "Persist every n-th step record");
    app->add_option("--steps", steps, "Expected schedule length (checked against the backbone)");
    app->add_option("--beta-start", beta_start, "Expected first beta");
    app->add_option("--beta-end", beta_end, "Expected last beta");
    app->add_option("-o,--out", output_dir, "Output directory");
    app->add_option("--runs", runs, "Runs per configuration");
    app->add_option("--workers", workers, "Concurrent runs");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config.empty()) {
      cfg = load_run_config(config);
    } else if (!backbone || !target) {
      throw ConfigError("either --config or both --backbone and --target are required");
    }
    if (backbone) cfg.backbone = *backbone;
    if (extractor) cfg.extractor.kind = *extractor;
    if (extractor_checkpoint) cfg.extractor.checkpoint = *extractor_checkpoint;
    if (grid) cfg.extractor.grid = *grid;
    if (target) cfg.target.path = *target;
    if (target_source) cfg.target.source = *target_source;
    auto& tr = cfg.target.transform;
    if (scale) {
      tr = TargetTransform{};
      tr.kind = "scale";
      tr.factor = *scale;
    }
    if (normalize_norm || !normalize_reference.empty()) {
      if (scale) throw ConfigError("--scale and --normalize-* are mutually exclusive");
      tr = TargetTransform{};
      tr.kind = "normalize";
      tr.norm = normalize_norm;
      for (const auto& r : normalize_reference) tr.reference.emplace_back(r);
    }
    auto& g = cfg.guidance;
    if (w_g) g.w_g = *w_g;
    if (clip) g.clip_multiplier = *clip;
    if (k_early) g.k_early = *k_early;
    if (k_late) g.k_late = *k_late;
    if (t_prime) g.t_prime = *t_prime;
    if (seed) g.seed = *seed;
    if (trace_every) g.trace_every = *trace_every;
    if (steps || beta_start || beta_end) {
      if (!(steps && beta_start && beta_end)) {
        throw ConfigError("--steps, --beta-start and --beta-end must be given together");
      }
      cfg.schedule = ScheduleSpec{*steps, *beta_start, *beta_end};
    }
    if (output_dir) cfg.output_dir = *output_dir;
    if (runs) cfg.runs = *runs;
    if (workers) cfg.workers = *workers;
    return cfg;
  }
};

std::vector<fs::path> expand_features(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in)) {
        if (e.path().extension() == ".fvec") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.emplace_back(in);
    }
  }
  return out;
}

void emit(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << std::endl;
    return;
  }
  std::ofstream f(out);
  f << j.dump(2) << '\n';
  if (!f) throw RunError("cannot write " + out);
  std::cerr << "wrote " << out << std::endl;
}

bool skip_existing(bool if_missing, const fs::path& p) {
  if (if_missing && fs::exists(p)) {
    std::cerr << p.string() << " exists; skipping" << std::endl;
    return true;
  }
  return false;
}

int run(int argc, char** argv) {
  CLI::App app{"Feature inversion by guided diffusion"};
  app.require_subcommand(1);

  // make-dataset
  auto* make_ds = app.add_subcommand("make-dataset", "Render the procedural shapes dataset");
  std::string ds_out;
  std::int64_t ds_count = 2048;
  ShapesConfig ds_cfg;
  bool ds_if_missing = false;
  make_ds->add_option("-o,--out", ds_out, "Output directory")->required();
  make_ds->add_option("--count", ds_count, "Number of images")->check(CLI::PositiveNumber);
  make_ds->add_option("--size", ds_cfg.size, "Image side length");
  make_ds->add_option("--channels", ds_cfg.channels, "1 or 3")->check(CLI::IsMember({1, 3}));
  make_ds->add_option("--seed", ds_cfg.seed, "Seed");
  make_ds->add_flag("--if-missing", ds_if_missing, "Do nothing if the manifest exists");

  // train-backbone
  auto* train_bb = app.add_subcommand("train-backbone", "Train the toy diffusion backbone");
  std::string bb_data, bb_out;
  int bb_steps = 100;
  double bb_beta_start = 1e-3, bb_beta_end = 0.1;
  BackboneTrainConfig bb_cfg;
  bool bb_if_missing = false;
  train_bb->add_option("--data", bb_data, "Dataset directory")->required();
  train_bb->add_option("-o,--out", bb_out, "Checkpoint path")->required();
  train_bb->add_option("--steps", bb_steps, "Number of diffusion steps T");
  train_bb->add_option("--beta-start", bb_beta_start, "First beta of the linear schedule");
  train_bb->add_option("--beta-end", bb_beta_end, "Last beta of the linear schedule");
  train_bb->add_option("--epochs", bb_cfg.epochs);
  train_bb->add_option("--batch", bb_cfg.batch_size);
  train_bb->add_option("--lr", bb_cfg.learning_rate);
  train_bb->add_option("--ema", bb_cfg.ema_decay);
  train_bb->add_option("--base-channels", bb_cfg.unet.base_channels);
  train_bb->add_option("--seed", bb_cfg.seed);
  train_bb->add_flag("--if-missing", bb_if_missing, "Do nothing if the checkpoint exists");

  // train-extractor
  auto* train_ex = app.add_subcommand("train-extractor", "Train the toy CNN feature extractor");
  std::string ex_data, ex_out, ex_heldout;
  ExtractorTrainConfig ex_cfg;
  bool ex_if_missing = false;
  train_ex->add_option("--data", ex_data, "Dataset directory")->required();
  train_ex->add_option("-o,--out", ex_out, "Checkpoint path")->required();
  train_ex->add_option("--heldout", ex_heldout, "Dataset for reporting held-out accuracy");
  train_ex->add_option("--epochs", ex_cfg.epochs);
  train_ex->add_option("--batch", ex_cfg.batch_size);
  train_ex->add_option("--lr", ex_cfg.learning_rate);
  train_ex->add_option("--base-channels", ex_cfg.cnn.base_channels);
  train_ex->add_option("--seed", ex_cfg.seed);
  train_ex->add_flag("--if-missing", ex_if_missing, "Do nothing if the checkpoint exists");

  // generate / sweep
  auto* gen = app.add_subcommand("generate", "Guided generation toward a target feature");
  RunFlags gen_flags;
  gen_flags.add_to(gen);

  auto* sweep = app.add_subcommand("sweep", "Repeat generation over values of one parameter");
  RunFlags sweep_flags;
  sweep_flags.add_to(sweep);
  std::string sweep_param;
  std::vector<std::string> sweep_values;
  sweep->add_option("--param", sweep_param, "w_g, clip_multiplier or emphasis")
      ->required()
      ->check(CLI::IsMember({"w_g", "clip_multiplier", "emphasis"}));
  sweep->add_option("--values", sweep_values, "Values (comma separated)")->required()->delimiter(',');

  // encode
  auto* enc = app.add_subcommand("encode", "Encode images or transform feature files");
  EncodeOptions enc_opts;
  std::string enc_kind = "analytic", enc_ckpt, enc_out;
  std::vector<std::string> enc_inputs, enc_reference;
  std::optional<double> enc_scale, enc_norm;
  enc->add_option("inputs", enc_inputs, ".png images or .fvec features")->required();
  enc->add_option("-o,--out", enc_out, "Output directory")->required();
  enc->add_option("--extractor", enc_kind)->check(CLI::IsMember({"analytic", "cnn"}));
  enc->add_option("--extractor-checkpoint", enc_ckpt);
  enc->add_option("--grid", enc_opts.extractor.grid);
  enc->add_option("--scale", enc_scale);
  enc->add_option("--normalize-norm", enc_norm);
  enc->add_option("--normalize-reference", enc_reference);
  enc->add_flag("--csv", enc_opts.csv, "Also write CSV copies");

  // analyze
  auto* ana = app.add_subcommand("analyze", "Feature-space and run reports");
  ana->require_subcommand(1);
  std::string ana_out, cohort_id = "cohort";
  std::vector<std::string> ana_inputs;
  auto* pairwise = ana->add_subcommand("pairwise", "Pairwise squared distances of a cohort");
  pairwise->add_option("features", ana_inputs, ".fvec files or directories")->required();
  pairwise->add_option("--cohort", cohort_id);
  pairwise->add_option("-o,--out", ana_out);
  auto* norms = ana->add_subcommand("norms", "L2 norms and their mean");
  norms->add_option("features", ana_inputs, ".fvec files or directories")->required();
  norms->add_option("-o,--out", ana_out);
  auto* cosine = ana->add_subcommand("cosine", "Cosine similarity and squared distance of two features");
  std::string cos_a, cos_b;
  cosine->add_option("a", cos_a)->required();
  cosine->add_option("b", cos_b)->required();
  auto* run_report = ana->add_subcommand("run", "Re-derive a run's summary from its trace");
  std::string run_dir;
  run_report->add_option("dir", run_dir, "Run directory")->required();
  run_report->add_option("-o,--out", ana_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  check_device(std::getenv("FEATINV_DEVICE"));

  if (make_ds->parsed()) {
    if (skip_existing(ds_if_missing, fs::path(ds_out) / "manifest.json")) return 0;
    write_dataset(ds_out, generate_shapes(ds_count, ds_cfg), ds_cfg);
    std::cerr << "wrote " << ds_count << " images to " << ds_out << std::endl;
    return 0;
  }

  if (train_bb->parsed()) {
    if (skip_existing(bb_if_missing, bb_out)) return 0;
    const auto data = load_dataset(bb_data);
    const auto sched = build_linear_schedule(bb_steps, bb_beta_start, bb_beta_end);
    bb_cfg.unet.image_channels = data.shape().channels;
    bb_cfg.on_epoch = [](std::int64_t epoch, double loss) {
      std::cerr << "epoch " << epoch << " loss " << loss << std::endl;
    };
    const auto trained = train_toy_backbone(data, sched, bb_cfg);
    save_backbone(bb_out, *trained.backbone);
    std::cerr << "saved " << bb_out << " after " << trained.report.steps << " steps" << std::endl;
    return 0;
  }

  if (train_ex->parsed()) {
    if (skip_existing(ex_if_missing, ex_out)) return 0;
    const auto data = load_dataset(ex_data);
    ex_cfg.cnn.image_channels = data.shape().channels;
    ex_cfg.cnn.image_size = data.shape().height;
    ex_cfg.on_epoch = [](std::int64_t epoch, double loss) {
      std::cerr << "epoch " << epoch << " loss " << loss << std::endl;
    };
    const auto trained = train_toy_extractor(data, ex_cfg);
    save_extractor(ex_out, *trained.extractor);
    std::cerr << "saved " << ex_out << " (" << trained.extractor->id() << "), train accuracy "
              << trained.train_accuracy << std::endl;
    if (!ex_heldout.empty()) {
      std::cerr << "held-out accuracy " << classification_accuracy(*trained.extractor, load_dataset(ex_heldout))
                << std::endl;
    }
    return 0;
  }

  if (gen->parsed()) return cmd_generate(gen_flags.resolve(), std::cerr);

  if (sweep->parsed()) {
    const auto report = cmd_sweep(sweep_flags.resolve(), sweep_param, sweep_values, std::cerr);
    int failures = 0;
    for (const auto& row : report.rows) failures += row.failures;
    std::cout << json(report).dump(2) << std::endl;
    return failures == 0 ? 0 : 1;
  }

  if (enc->parsed()) {
    enc_opts.extractor.kind = enc_kind;
    enc_opts.extractor.checkpoint = enc_ckpt;
    enc_opts.output_dir = enc_out;
    for (const auto& i : enc_inputs) enc_opts.inputs.emplace_back(i);
    if (enc_scale) {
      enc_opts.transform.kind = "scale";
      enc_opts.transform.factor = *enc_scale;
    }
    if (enc_norm || !enc_reference.empty()) {
      if (enc_scale) throw ConfigError("--scale and --normalize-* are mutually exclusive");
      enc_opts.transform.kind = "normalize";
      enc_opts.transform.norm = enc_norm;
      for (const auto& r : enc_reference) enc_opts.transform.reference.emplace_back(r);
    }
    if (enc_opts.extractor.kind == "cnn" && enc_ckpt.empty()) throw ConfigError("--extractor-checkpoint is required");
    for (const auto& p : cmd_encode(enc_opts)) std::cout << p.string() << '\n';
    return 0;
  }

  if (pairwise->parsed()) {
    const auto report = pairwise_squared_distances(read_features(expand_features(ana_inputs)), cohort_id);
    emit(report, ana_out);
    return 0;
  }
  if (norms->parsed()) {
    const auto stats = norm_statistics(read_features(expand_features(ana_inputs)));
    emit({{"mean_norm", stats.mean_norm}, {"norms", stats.norms}}, ana_out);
    return 0;
  }
  if (cosine->parsed()) {
    const auto f = read_features({cos_a, cos_b});
    emit({{"cosine", cosine_similarity(f[0], f[1])}, {"squared_distance", squared_distance(f[0], f[1])}}, "");
    return 0;
  }
  if (run_report->parsed()) {
    const auto report = analyze_run(run_dir);
    emit(report, ana_out);
    return report.value("consistent", false) && report.value("/contracts/ok"_json_pointer, true) ? 0 : 1;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "featinv: " << e.what() << std::endl;
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "featinv: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "featinv: " << e.what() << std::endl;
    return 1;
  }
}
