#include "featinv/run_config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "featinv/errors.hpp"

namespace featinv {

namespace {

void require_file(const std::filesystem::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " is not set");
  if (!std::filesystem::exists(p)) throw ConfigError(what + " not found: " + p.string());
}

void resolve(std::filesystem::path& p, const std::filesystem::path& base) {
  if (!p.empty() && p.is_relative()) p = (base / p).lexically_normal();
}

}  // namespace

void RunConfig::validate() const {
  require_file(backbone, "backbone checkpoint");
  if (extractor.kind == "cnn") {
    require_file(extractor.checkpoint, "extractor checkpoint");
  } else if (extractor.kind == "analytic") {
    if (extractor.grid < 1) throw ConfigError("analytic extractor grid must be >= 1");
  } else {
    throw ConfigError("unknown extractor kind '" + extractor.kind + "' (expected analytic or cnn)");
  }

  if (target.source != "feature" && target.source != "image" && target.source != "caption") {
    throw ConfigError("unknown target source '" + target.source + "' (expected feature, image or caption)");
  }
  require_file(target.path, "target " + target.source);
  const auto& tr = target.transform;
  if (tr.kind == "scale") {
    if (!std::isfinite(tr.factor)) throw ConfigError("scale factor must be finite");
  } else if (tr.kind == "normalize") {
    if (tr.norm.has_value() == !tr.reference.empty()) {
      throw ConfigError("normalize needs exactly one of 'norm' or 'reference'");
    }
    if (tr.norm && !(*tr.norm > 0.0)) throw ConfigError("normalize norm must be > 0");
    for (const auto& r : tr.reference) require_file(r, "reference feature");
  } else if (tr.kind != "none") {
    throw ConfigError("unknown target transform '" + tr.kind + "'");
  }

  if (schedule && schedule->steps < 1) throw ConfigError("schedule.steps must be >= 1");
  if (runs < 1) throw ConfigError("runs must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir is not set");
}

void to_json(nlohmann::json& j, const RunConfig& cfg) {
  nlohmann::json transform{{"kind", cfg.target.transform.kind}};
  if (cfg.target.transform.kind == "scale") transform["factor"] = cfg.target.transform.factor;
  if (cfg.target.transform.norm) transform["norm"] = *cfg.target.transform.norm;
  if (!cfg.target.transform.reference.empty()) {
    std::vector<std::string> refs;
    for (const auto& r : cfg.target.transform.reference) refs.push_back(r.string());
    transform["reference"] = refs;
  }
  nlohmann::json extractor{{"kind", cfg.extractor.kind}};
  if (cfg.extractor.kind == "cnn") {
    extractor["checkpoint"] = cfg.extractor.checkpoint.string();
  } else {
    extractor["grid"] = cfg.extractor.grid;
  }
  j = nlohmann::json{{"backbone", cfg.backbone.string()},
                     {"extractor", extractor},
                     {"target", {{"source", cfg.target.source}, {"path", cfg.target.path.string()}, {"transform", transform}}},
                     {"guidance", cfg.guidance},
                     {"output_dir", cfg.output_dir.string()},
                     {"runs", cfg.runs},
                     {"workers", cfg.workers}};
  if (cfg.schedule) {
    j["schedule"] = {{"steps", cfg.schedule->steps},
                     {"beta_start", cfg.schedule->beta_start},
                     {"beta_end", cfg.schedule->beta_end}};
  }
}

void from_json(const nlohmann::json& j, RunConfig& cfg) {
  static const std::vector<std::string> known{"backbone", "extractor", "target", "guidance",
                                              "schedule", "output_dir", "runs", "workers"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  cfg.backbone = j.at("backbone").get<std::string>();
  if (j.contains("extractor")) {
    const auto& e = j.at("extractor");
    cfg.extractor.kind = e.value("kind", cfg.extractor.kind);
    cfg.extractor.checkpoint = e.value("checkpoint", std::string{});
    cfg.extractor.grid = e.value("grid", cfg.extractor.grid);
  }
  const auto& t = j.at("target");
  cfg.target.source = t.value("source", cfg.target.source);
  cfg.target.path = t.at("path").get<std::string>();
  if (t.contains("transform")) {
    const auto& tr = t.at("transform");
    auto& out = cfg.target.transform;
    out.kind = tr.value("kind", out.kind);
    out.factor = tr.value("factor", out.factor);
    if (tr.contains("norm")) out.norm = tr.at("norm").get<double>();
    for (const auto& r : tr.value("reference", std::vector<std::string>{})) out.reference.emplace_back(r);
  }
  if (j.contains("guidance")) j.at("guidance").get_to(cfg.guidance);
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    cfg.schedule = ScheduleSpec{s.at("steps").get<int>(), s.at("beta_start").get<double>(),
                                s.at("beta_end").get<double>()};
  }
  cfg.output_dir = j.value("output_dir", cfg.output_dir.string());
  cfg.runs = j.value("runs", cfg.runs);
  cfg.workers = j.value("workers", cfg.workers);
}

void resolve_paths(RunConfig& cfg, const std::filesystem::path& base) {
  resolve(cfg.backbone, base);
  resolve(cfg.extractor.checkpoint, base);
  resolve(cfg.target.path, base);
  for (auto& r : cfg.target.transform.reference) resolve(r, base);
  resolve(cfg.output_dir, base);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  RunConfig cfg;
  try {
    nlohmann::json::parse(in).get_to(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid config " + path.string() + ": " + e.what());
  }
  resolve_paths(cfg, std::filesystem::absolute(path).parent_path());
  return cfg;
}

}  // namespace featinv
