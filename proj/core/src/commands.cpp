#include "featinv/commands.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "featinv/digest.hpp"
#include "featinv/errors.hpp"
#include "featinv/quantizer.hpp"
#include "featinv/random.hpp"
#include "featinv/trace_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace featinv {

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw RunError("cannot write " + path.string());
}

json step_json(const StepIndex& s) { return {{"t", s.t}, {"k", s.k}}; }

json schedule_json(const VarianceSchedule& sched) {
  const auto& b = sched.betas();
  const std::string raw(reinterpret_cast<const char*>(b.data()), b.size() * sizeof(double));
  return {{"steps", sched.steps()},
          {"beta_first", b.front()},
          {"beta_last", b.back()},
          {"alpha_bar_T", sched.alpha_bar(sched.steps())},
          {"betas_sha256", sha256_hex(raw)}};
}

// Serialises log lines from concurrent runs.
class Logger {
 public:
  explicit Logger(std::ostream* out) : out_(out) {}
  void line(const std::string& s) {
    if (out_ == nullptr) return;
    std::lock_guard<std::mutex> lock(mutex_);
    *out_ << s << std::endl;
  }

 private:
  std::ostream* out_;
  std::mutex mutex_;
};

std::string run_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "run_%03d", index);
  return buf;
}

RunOutcome run_one(const Session& s, GuidanceConfig guidance, const fs::path& dir, int index) {
  RunOutcome outcome;
  outcome.index = index;
  outcome.dir = dir;
  const auto base_seed = guidance.seed;
  guidance.seed = derive_seed(base_seed, static_cast<std::uint64_t>(index));
  outcome.seed = guidance.seed;

  fs::create_directories(dir);
  json resolved = s.config;
  resolved["guidance"] = guidance;
  resolved["guidance"]["seed"] = base_seed;
  write_json(dir / "manifest.json", {{"config", resolved},
                                     {"run_index", index},
                                     {"seed", guidance.seed},
                                     {"base_seed", base_seed},
                                     {"extractor_id", s.extractor->id()},
                                     {"schedule", schedule_json(s.backbone->schedule())},
                                     {"backbone",
                                      {{"path", s.config.backbone.string()},
                                       {"sha256", s.backbone_digest},
                                       {"description", s.backbone->describe()}}},
                                     {"target", s.target.provenance}});

  json summary{{"run_index", index}, {"seed", guidance.seed}};
  try {
    TraceWriter writer(dir / "trace.jsonl");
    const auto trace = generate(s.target.feature, *s.backbone, *s.extractor, guidance, &writer);
    save_image(dir / "best.png", trace.best_image);
    save_image(dir / "final.png", trace.final_image);
    outcome.ok = true;
    outcome.best_distance = trace.best_distance;
    outcome.final_distance = trace.final_distance;
    outcome.best_step = trace.best_step;
    summary.update({{"status", "ok"},
                    {"best_distance", trace.best_distance},
                    {"best_step", step_json(trace.best_step)},
                    {"final_distance", trace.final_distance},
                    {"iterations", trace.iterations},
                    {"flagged_steps", trace.flagged_steps}});
  } catch (const GenerationAborted& e) {
    outcome.error = e.what();
    const auto& partial = e.partial();
    summary.update({{"status", "aborted"}, {"error", e.what()}, {"failed_step", step_json(e.step())}});
    if (partial.best_image.values.defined()) {
      save_image(dir / "best.png", partial.best_image);
      outcome.best_distance = partial.best_distance;
      outcome.best_step = partial.best_step;
      summary.update({{"best_distance", partial.best_distance}, {"best_step", step_json(partial.best_step)}});
    }
  } catch (const std::exception& e) {
    outcome.error = e.what();
    summary.update({{"status", "failed"}, {"error", e.what()}});
  }
  write_json(dir / "summary.json", summary);
  return outcome;
}

std::vector<std::string> split_lines_csv(const SweepReport& r) {
  std::vector<std::string> lines{"parameter,value,runs,failures,mean,std,min,q1,median,q3,max"};
  for (const auto& row : r.rows) {
    std::ostringstream line;
    line.precision(17);
    line << r.parameter << ',' << row.value << ',' << row.best_distances.size() + row.failures << ','
         << row.failures;
    if (row.has_summary) {
      const auto& s = row.summary;
      line << ',' << s.mean << ',' << s.std << ',' << s.min << ',' << s.q1 << ',' << s.median << ',' << s.q3 << ','
           << s.max;
    } else {
      line << ",,,,,,,";
    }
    lines.push_back(line.str());
  }
  return lines;
}

}  // namespace

void check_device(const char* env_value) {
  if (env_value == nullptr) return;
  const std::string v(env_value);
  if (v.empty() || v == "cpu") return;
  throw ConfigError("device '" + v + "' is not available; this build runs on cpu only");
}

std::shared_ptr<FeatureExtractor> make_extractor(const ExtractorSpec& spec, const ImageShape& image_shape) {
  if (spec.kind == "analytic") {
    if (image_shape.height % spec.grid != 0 || image_shape.width % spec.grid != 0) {
      throw ConfigError("analytic grid " + std::to_string(spec.grid) + " does not divide " + image_shape.str());
    }
    return std::make_shared<AnalyticExtractor>(image_shape, spec.grid);
  }
  if (spec.kind == "cnn") {
    try {
      return load_extractor(spec.checkpoint);
    } catch (const std::exception& e) {
      throw ConfigError("cannot load extractor " + spec.checkpoint.string() + ": " + e.what());
    }
  }
  throw ConfigError("unknown extractor kind '" + spec.kind + "'");
}

FeatureVector apply_transform(const FeatureVector& f, const TargetTransform& transform) {
  if (transform.kind == "none") return f;
  if (transform.kind == "scale") return scale_feature(f, transform.factor);
  if (transform.kind == "normalize") {
    double norm = 0.0;
    if (transform.norm) {
      norm = *transform.norm;
    } else {
      norm = norm_statistics(read_features(transform.reference)).mean_norm;
    }
    return normalize_to_norm(f, norm);
  }
  throw ConfigError("unknown transform '" + transform.kind + "'");
}

ResolvedTarget resolve_target(const TargetSpec& spec, const FeatureExtractor& extractor) {
  ResolvedTarget out;
  json prov{{"source", spec.source}, {"path", spec.path.string()}};
  FeatureVector raw;
  try {
    if (spec.source == "image") {
      const auto image = load_image(spec.path);
      prov["image_sha256"] = sha256_file(spec.path);
      raw = extractor.extract(image);
    } else {
      raw = read_feature(spec.path);
      prov["original_extractor_id"] = raw.extractor_id();
    }
  } catch (const std::exception& e) {
    throw ConfigError("cannot read target " + spec.path.string() + ": " + e.what());
  }
  if (static_cast<std::int64_t>(raw.dim()) != extractor.dim()) {
    throw ConfigError("target has dimension " + std::to_string(raw.dim()) + " but the extractor produces " +
                      std::to_string(extractor.dim()));
  }
  if (raw.extractor_id() != extractor.id()) {
    // Caption features come from a different encoder that shares the space.
    if (spec.source != "caption") {
      throw ConfigError("target feature was produced by '" + raw.extractor_id() + "', not by '" + extractor.id() + "'");
    }
    raw = FeatureVector(raw.values(), extractor.id());
  }

  json transform{{"kind", spec.transform.kind}};
  try {
    out.feature = apply_transform(raw, spec.transform);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("target transform failed: ") + e.what());
  }
  if (spec.transform.kind == "scale") transform["factor"] = spec.transform.factor;
  if (spec.transform.kind == "normalize") transform["norm"] = out.feature.norm();
  prov["transform"] = transform;
  prov["input_norm"] = raw.norm();
  prov["norm"] = out.feature.norm();
  out.provenance = prov;
  return out;
}

Session open_session(const RunConfig& cfg) {
  cfg.validate();
  Session s;
  s.config = cfg;
  try {
    s.backbone = load_backbone(cfg.backbone);
  } catch (const std::exception& e) {
    throw ConfigError("cannot load backbone " + cfg.backbone.string() + ": " + e.what());
  }
  s.backbone_digest = sha256_file(cfg.backbone);
  const auto& sched = s.backbone->schedule();
  if (cfg.schedule) {
    const auto& want = *cfg.schedule;
    const auto& b = sched.betas();
    auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b)); };
    if (want.steps != sched.steps() || !close(want.beta_start, b.front()) || !close(want.beta_end, b.back())) {
      throw ConfigError("configured schedule does not match the backbone checkpoint");
    }
  }
  cfg.guidance.validate(sched.steps());
  s.extractor = make_extractor(cfg.extractor, s.backbone->image_shape());
  if (!(s.extractor->input_shape() == s.backbone->image_shape())) {
    throw ConfigError("extractor expects " + s.extractor->input_shape().str() + " but the backbone produces " +
                      s.backbone->image_shape().str());
  }
  s.target = resolve_target(cfg.target, *s.extractor);
  return s;
}

std::vector<RunOutcome> run_batch(const Session& session, const GuidanceConfig& guidance, const fs::path& out_dir,
                                  int runs, int workers, std::ostream* log) {
  if (runs < 1) throw ConfigError("runs must be >= 1");
  guidance.validate(session.backbone->schedule().steps());
  fs::create_directories(out_dir);

  std::vector<RunOutcome> outcomes(static_cast<std::size_t>(runs));
  std::atomic<int> next{0};
  std::mutex model_mutex;
  const bool serialize = !session.backbone->reentrant() || !session.extractor->reentrant();
  Logger logger(log);

  auto worker = [&] {
    for (int i = next++; i < runs; i = next++) {
      std::unique_lock<std::mutex> lock(model_mutex, std::defer_lock);
      if (serialize) lock.lock();
      auto& o = outcomes[static_cast<std::size_t>(i)];
      try {
        o = run_one(session, guidance, out_dir / run_name(i), i);
      } catch (const std::exception& e) {
        o.index = i;
        o.dir = out_dir / run_name(i);
        o.error = e.what();
      }
      std::ostringstream msg;
      msg.precision(6);
      if (o.ok) {
        msg << run_name(i) << ": best " << o.best_distance << " at t=" << o.best_step.t << " k=" << o.best_step.k
            << ", final " << o.final_distance;
      } else {
        msg << run_name(i) << ": FAILED: " << o.error;
      }
      logger.line(msg.str());
    }
  };

  const int n = std::min(workers, runs);
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < n; ++w) pool.emplace_back(worker);
  }
  return outcomes;
}

int cmd_generate(const RunConfig& cfg, std::ostream& log) {
  const auto session = open_session(cfg);
  const auto outcomes = run_batch(session, cfg.guidance, cfg.output_dir, cfg.runs, cfg.workers, &log);
  json runs = json::array();
  bool all_ok = true;
  for (const auto& o : outcomes) {
    all_ok = all_ok && o.ok;
    json r{{"run", o.dir.filename().string()}, {"seed", o.seed}, {"ok", o.ok}};
    if (o.ok) {
      r.update({{"best_distance", o.best_distance}, {"final_distance", o.final_distance}});
    } else {
      r["error"] = o.error;
    }
    runs.push_back(r);
  }
  write_json(cfg.output_dir / "batch.json", {{"runs", runs}, {"target", session.target.provenance}});
  return all_ok ? 0 : 1;
}

void to_json(json& j, const SweepReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json jr{{"value", row.value}, {"best_distances", row.best_distances}, {"failures", row.failures}};
    if (row.has_summary) jr["summary"] = row.summary;
    rows.push_back(jr);
  }
  j = json{{"parameter", r.parameter}, {"rows", rows}};
}

GuidanceConfig apply_sweep_value(GuidanceConfig base, const std::string& parameter, const std::string& value) {
  auto number = [&] {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size()) throw ConfigError("sweep value '" + value + "' is not a number");
    return v;
  };
  if (parameter == "w_g") {
    base.w_g = number();
  } else if (parameter == "clip_multiplier") {
    base.clip_multiplier = number();
  } else if (parameter == "emphasis") {
    if (value == "off") {
      base.t_prime = 0;
    } else if (value != "on") {
      throw ConfigError("emphasis values are 'on' and 'off'");
    }
  } else {
    throw ConfigError("unsupported sweep parameter '" + parameter + "' (w_g, clip_multiplier or emphasis)");
  }
  return base;
}

SweepReport cmd_sweep(const RunConfig& cfg, const std::string& parameter, const std::vector<std::string>& values,
                      std::ostream& log) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const auto session = open_session(cfg);
  const int T = session.backbone->schedule().steps();
  std::vector<GuidanceConfig> configs;
  for (const auto& v : values) {
    configs.push_back(apply_sweep_value(cfg.guidance, parameter, v));
    configs.back().validate(T);
  }

  SweepReport report;
  report.parameter = parameter;
  for (std::size_t i = 0; i < values.size(); ++i) {
    log << parameter << "=" << values[i] << std::endl;
    const auto outcomes =
        run_batch(session, configs[i], cfg.output_dir / (parameter + "=" + values[i]), cfg.runs, cfg.workers, &log);
    SweepRow row;
    row.value = values[i];
    for (const auto& o : outcomes) {
      if (o.ok) {
        row.best_distances.push_back(o.best_distance);
      } else {
        ++row.failures;
      }
    }
    if (!row.best_distances.empty()) {
      row.summary = summarize(row.best_distances);
      row.has_summary = true;
    }
    report.rows.push_back(std::move(row));
  }

  std::ofstream csv(cfg.output_dir / "summary.csv");
  for (const auto& line : split_lines_csv(report)) csv << line << '\n';
  if (!csv) throw RunError("cannot write summary.csv");
  write_json(cfg.output_dir / "boxplot.json", report);
  return report;
}

std::vector<FeatureVector> read_features(const std::vector<fs::path>& paths) {
  std::vector<FeatureVector> out;
  for (const auto& p : paths) {
    try {
      out.push_back(read_feature(p));
    } catch (const std::exception& e) {
      throw ConfigError("cannot read feature " + p.string() + ": " + e.what());
    }
  }
  return out;
}

std::vector<fs::path> cmd_encode(const EncodeOptions& opts) {
  if (opts.inputs.empty()) throw ConfigError("encode needs at least one input");
  fs::create_directories(opts.output_dir);
  std::shared_ptr<FeatureExtractor> extractor;
  std::vector<fs::path> written;
  for (const auto& in : opts.inputs) {
    if (!fs::exists(in)) throw ConfigError("input not found: " + in.string());
    FeatureVector f;
    if (in.extension() == ".fvec") {
      f = read_features({in}).front();
    } else {
      QuantizedImage image;
      try {
        image = load_image(in);
      } catch (const std::exception& e) {
        throw ConfigError("cannot read image " + in.string() + ": " + e.what());
      }
      if (!extractor) extractor = make_extractor(opts.extractor, image.shape());
      try {
        f = extractor->extract(image);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(in.string() + ": " + e.what());
      }
    }
    try {
      f = apply_transform(f, opts.transform);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(in.string() + ": " + e.what());
    }
    const auto out = opts.output_dir / (in.stem().string() + ".fvec");
    write_feature(out, f);
    if (opts.csv) write_feature_csv(opts.output_dir / (in.stem().string() + ".csv"), f);
    written.push_back(out);
  }
  return written;
}

json analyze_run(const fs::path& run_dir) {
  const auto records = read_trace(run_dir / "trace.jsonl");
  const auto derived = summarize_trace(records);
  json out{{"run", run_dir.string()}, {"derived", derived}};

  std::ifstream in(run_dir / "manifest.json");
  if (in) {
    const auto manifest = json::parse(in);
    const double c = manifest.at("config").at("guidance").value("clip_multiplier", 3.0);
    out["contracts"] = check_trace_contracts(records, c);
  }
  std::ifstream sin(run_dir / "summary.json");
  if (sin) {
    const auto stored = json::parse(sin);
    out["stored"] = stored;
    bool consistent = stored.contains("best_distance") && stored["best_distance"].get<double>() == derived.best_distance &&
                      stored["best_step"]["t"].get<int>() == derived.best_step.t &&
                      stored["best_step"]["k"].get<int>() == derived.best_step.k;
    if (stored.contains("final_distance")) {
      consistent = consistent && derived.has_final && stored["final_distance"].get<double>() == derived.final_distance;
    }
    out["consistent"] = consistent;
  }
  return out;
}

}  // namespace featinv
