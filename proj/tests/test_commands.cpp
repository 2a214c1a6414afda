#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <sys/wait.h>

#include "featinv/analysis.hpp"
#include "featinv/commands.hpp"
#include "featinv/errors.hpp"
#include "featinv/quantizer.hpp"
#include "featinv/random.hpp"
#include "featinv/trace_io.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace featinv;
using featinv::test::ScratchDir;

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// A workspace with an untrained tiny backbone, a few images and a target.
class CommandsTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::make_unique<ScratchDir>(::testing::UnitTest::GetInstance()->current_test_info()->name());
    save_backbone(path("bb.pt"), *featinv::test::tiny_backbone(8));
    auto gen = make_generator(1);
    for (int i = 0; i < 3; ++i) {
      save_image(path("img" + std::to_string(i) + ".png"), virtual_save(torch::rand({3, 8, 8}, gen) * 2 - 1));
    }
    EncodeOptions enc;
    enc.inputs = {path("img0.png")};
    enc.output_dir = dir_->path();
    cmd_encode(enc);
  }

  fs::path path(const std::string& leaf) const { return *dir_ / leaf; }

  RunConfig config(const std::string& out) const {
    RunConfig cfg;
    cfg.backbone = path("bb.pt");
    cfg.target.path = path("img0.fvec");
    cfg.guidance.k_early = 2;
    cfg.guidance.k_late = 1;
    cfg.guidance.t_prime = 2;
    cfg.guidance.seed = 17;
    cfg.output_dir = path(out);
    return cfg;
  }

  std::unique_ptr<ScratchDir> dir_;
  std::ostringstream log_;
};

}  // namespace

TEST(RunConfigFile, ParsesAndResolvesRelativePaths) {
  ScratchDir dir("config");
  {
    std::ofstream out(dir / "run.json");
    out << R"({"backbone": "models/bb.pt", "target": {"path": "t.fvec", "transform": {"kind": "scale", "factor": 0.8}},
               "guidance": {"w_g": 2, "k_early": 20}, "runs": 3, "output_dir": "out"})";
  }
  const auto cfg = load_run_config(dir / "run.json");
  EXPECT_EQ(cfg.backbone, dir / "models/bb.pt");
  EXPECT_EQ(cfg.target.path, dir / "t.fvec");
  EXPECT_EQ(cfg.output_dir, dir / "out");
  EXPECT_EQ(cfg.target.transform.kind, "scale");
  EXPECT_DOUBLE_EQ(cfg.target.transform.factor, 0.8);
  EXPECT_EQ(cfg.guidance.w_g, 2.0);
  EXPECT_EQ(cfg.guidance.k_early, 20);
  EXPECT_EQ(cfg.guidance.k_late, 8);  // default kept
  EXPECT_EQ(cfg.runs, 3);
  EXPECT_THROW(cfg.validate(), ConfigError);  // files do not exist

  // The serialized form parses back to the same config.
  RunConfig again = json(cfg).get<RunConfig>();
  EXPECT_EQ(json(again), json(cfg));
}

TEST(RunConfigFile, RejectsMalformedInput) {
  ScratchDir dir("config_bad");
  {
    std::ofstream out(dir / "typo.json");
    out << R"({"backbone": "bb.pt", "target": {"path": "t.fvec"}, "wg": 4})";
  }
  EXPECT_THROW(load_run_config(dir / "typo.json"), ConfigError);
  {
    std::ofstream out(dir / "broken.json");
    out << "{ not json";
  }
  EXPECT_THROW(load_run_config(dir / "broken.json"), ConfigError);
  EXPECT_THROW(load_run_config(dir / "missing.json"), ConfigError);
}

TEST(Device, OnlyCpu) {
  EXPECT_NO_THROW(check_device(nullptr));
  EXPECT_NO_THROW(check_device(""));
  EXPECT_NO_THROW(check_device("cpu"));
  EXPECT_THROW(check_device("cuda:0"), ConfigError);
}

TEST(SweepValues, Apply) {
  GuidanceConfig base;
  EXPECT_EQ(apply_sweep_value(base, "w_g", "0.5").w_g, 0.5);
  EXPECT_EQ(apply_sweep_value(base, "clip_multiplier", "2").clip_multiplier, 2.0);
  EXPECT_EQ(apply_sweep_value(base, "emphasis", "off").t_prime, 0);
  EXPECT_EQ(apply_sweep_value(base, "emphasis", "on").t_prime, base.t_prime);
  EXPECT_THROW(apply_sweep_value(base, "w_g", "four"), ConfigError);
  EXPECT_THROW(apply_sweep_value(base, "emphasis", "maybe"), ConfigError);
  EXPECT_THROW(apply_sweep_value(base, "k_late", "3"), ConfigError);
}

TEST_F(CommandsTest, EncodeIsDeterministicAndConsistent) {
  EncodeOptions enc;
  enc.inputs = {path("img0.png"), path("img1.png"), path("img2.png")};
  enc.output_dir = path("a");
  enc.csv = true;
  const auto first = cmd_encode(enc);
  enc.output_dir = path("b");
  const auto second = cmd_encode(enc);
  ASSERT_EQ(first.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(slurp(first[i]), slurp(second[i]));
  EXPECT_TRUE(fs::exists(path("a/img0.csv")));

  const auto fs_ = read_features(first);
  EXPECT_EQ(feature_loss(fs_[0], fs_[0]), 0.0);

  const AnalyticExtractor ex({3, 8, 8}, 2);
  std::vector<FeatureVector> direct;
  for (int i = 0; i < 3; ++i) direct.push_back(ex.extract(load_image(path("img" + std::to_string(i) + ".png"))));
  EXPECT_EQ(pairwise_squared_distances(fs_).pairwise, pairwise_squared_distances(direct).pairwise);

  EncodeOptions scaled;
  scaled.inputs = {first[0]};
  scaled.output_dir = path("scaled");
  scaled.transform.kind = "scale";
  scaled.transform.factor = 0.8;
  const auto s = read_features(cmd_encode(scaled));
  EXPECT_NEAR(s[0].norm(), 0.8 * fs_[0].norm(), 1e-9);

  EncodeOptions normalized = scaled;
  normalized.output_dir = path("normalized");
  normalized.transform = TargetTransform{};
  normalized.transform.kind = "normalize";
  normalized.transform.reference = {first[1], first[2]};
  const auto n = read_features(cmd_encode(normalized));
  EXPECT_NEAR(n[0].norm(), norm_statistics({fs_[1], fs_[2]}).mean_norm, 1e-9);

  EncodeOptions missing;
  missing.inputs = {path("nope.png")};
  missing.output_dir = path("x");
  EXPECT_THROW(cmd_encode(missing), ConfigError);
}

TEST_F(CommandsTest, GenerateFansOutAndPersists) {
  auto cfg = config("gen");
  cfg.runs = 3;
  ASSERT_EQ(cmd_generate(cfg, log_), 0);
  for (int i = 0; i < 3; ++i) {
    const auto run = path("gen/run_00" + std::to_string(i));
    for (const char* f : {"manifest.json", "trace.jsonl", "best.png", "final.png", "summary.json"}) {
      EXPECT_TRUE(fs::exists(run / f)) << run / f;
    }
    const auto manifest = read_json(run / "manifest.json");
    EXPECT_EQ(manifest["seed"].get<std::uint64_t>(), derive_seed(17, static_cast<std::uint64_t>(i)));
    EXPECT_EQ(manifest["extractor_id"], "analytic-meanpool-2x2");
    EXPECT_EQ(manifest["backbone"]["sha256"].get<std::string>().size(), 64u);
    EXPECT_EQ(manifest["schedule"]["steps"], 8);
    EXPECT_EQ(manifest["config"]["guidance"]["k_late"], 1);

    const auto report = analyze_run(run);
    EXPECT_TRUE(report["consistent"].get<bool>());
    EXPECT_TRUE(report["contracts"]["ok"].get<bool>());

    const auto summary = read_json(run / "summary.json");
    const AnalyticExtractor ex({3, 8, 8}, 2);
    const auto target = read_feature(path("img0.fvec"));
    EXPECT_NEAR(feature_loss(ex.extract(load_image(run / "best.png")), target),
                summary["best_distance"].get<double>(), 1e-6 * summary["best_distance"].get<double>() + 1e-9);
  }
  EXPECT_FALSE(fs::exists(path("gen/run_003")));
}

TEST_F(CommandsTest, SameSeedSameResultAcrossWorkerCounts) {
  auto a = config("a");
  a.runs = 2;
  auto b = config("b");
  b.runs = 2;
  b.workers = 2;
  ASSERT_EQ(cmd_generate(a, log_), 0);
  ASSERT_EQ(cmd_generate(b, log_), 0);
  for (const char* run : {"run_000", "run_001"}) {
    EXPECT_EQ(read_json(path("a") / run / "summary.json")["best_distance"],
              read_json(path("b") / run / "summary.json")["best_distance"]);
    EXPECT_EQ(slurp(path("a") / run / "trace.jsonl"), slurp(path("b") / run / "trace.jsonl"));
  }
}

TEST_F(CommandsTest, ManifestRecordsTargetTransform) {
  auto cfg = config("scaled");
  cfg.target.transform.kind = "scale";
  cfg.target.transform.factor = 0.8;
  ASSERT_EQ(cmd_generate(cfg, log_), 0);
  const auto m = read_json(path("scaled/run_000/manifest.json"));
  EXPECT_EQ(m["target"]["transform"]["kind"], "scale");
  EXPECT_EQ(m["target"]["transform"]["factor"], 0.8);
  EXPECT_NEAR(m["target"]["norm"].get<double>(), 0.8 * m["target"]["input_norm"].get<double>(), 1e-9);
  EXPECT_EQ(m["config"]["target"]["transform"]["factor"], 0.8);
}

TEST_F(CommandsTest, ImageAndCaptionTargets) {
  auto cfg = config("img");
  cfg.target.source = "image";
  cfg.target.path = path("img0.png");
  const auto s = open_session(cfg);
  EXPECT_EQ(s.target.feature, read_feature(path("img0.fvec")));

  write_feature(path("caption.fvec"), FeatureVector(std::vector<double>(12, 40.0), "text-encoder"));
  cfg.target.path = path("caption.fvec");
  cfg.target.source = "feature";
  EXPECT_THROW(open_session(cfg), ConfigError);
  cfg.target.source = "caption";
  cfg.target.transform.kind = "normalize";
  cfg.target.transform.norm = 100.0;
  const auto c = open_session(cfg);
  EXPECT_NEAR(c.target.feature.norm(), 100.0, 1e-9);
  EXPECT_EQ(c.target.provenance["original_extractor_id"], "text-encoder");
}

TEST_F(CommandsTest, ScheduleCheck) {
  auto cfg = config("sched");
  cfg.schedule = ScheduleSpec{8, 1e-3, 0.1};
  EXPECT_NO_THROW(open_session(cfg));
  cfg.schedule = ScheduleSpec{9, 1e-3, 0.1};
  EXPECT_THROW(open_session(cfg), ConfigError);
}

TEST_F(CommandsTest, FailedRunsAreRecordedAndKeepArtifacts) {
  // Squared distances overflow to infinity.
  write_feature(path("huge.fvec"), FeatureVector(std::vector<double>(12, 1e200), "analytic-meanpool-2x2"));
  auto cfg = config("fail");
  cfg.target.path = path("huge.fvec");
  cfg.runs = 2;
  EXPECT_EQ(cmd_generate(cfg, log_), 1);
  const auto summary = read_json(path("fail/run_001/summary.json"));
  EXPECT_EQ(summary["status"], "aborted");
  EXPECT_TRUE(fs::exists(path("fail/run_001/manifest.json")));
  EXPECT_TRUE(fs::exists(path("fail/run_001/trace.jsonl")));

  cfg.output_dir = path("fail_sweep");
  const auto report = cmd_sweep(cfg, "w_g", {"1", "2"}, log_);
  ASSERT_EQ(report.rows.size(), 2u);
  EXPECT_EQ(report.rows[0].failures, 2);
  EXPECT_EQ(report.rows[1].failures, 2);
  EXPECT_TRUE(fs::exists(path("fail_sweep/summary.csv")));
}

TEST_F(CommandsTest, SweepTablesAndBoxPlotData) {
  auto cfg = config("sweep");
  cfg.runs = 3;
  const auto single = cmd_sweep(cfg, "w_g", {"4"}, log_);
  ASSERT_EQ(single.rows.size(), 1u);
  EXPECT_EQ(single.rows[0].best_distances.size(), 3u);

  cfg.output_dir = path("emph");
  const auto report = cmd_sweep(cfg, "emphasis", {"on", "off"}, log_);
  ASSERT_EQ(report.rows.size(), 2u);
  for (const auto& row : report.rows) {
    // Mean and std re-derived from the per-run summaries.
    std::vector<double> xs;
    for (int i = 0; i < 3; ++i) {
      xs.push_back(read_json(path("emph/emphasis=" + row.value + "/run_00" + std::to_string(i) + "/summary.json"))
                       ["best_distance"]
                           .get<double>());
    }
    double mean = (xs[0] + xs[1] + xs[2]) / 3.0, ss = 0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    ASSERT_TRUE(row.has_summary);
    EXPECT_NEAR(row.summary.mean, mean, 1e-9 * mean);
    EXPECT_NEAR(row.summary.std, std::sqrt(ss / 3.0), 1e-9 * mean + 1e-12);
  }
  const auto box = read_json(path("emph/boxplot.json"));
  EXPECT_EQ(box["rows"].size(), 2u);
  std::ifstream csv(path("emph/summary.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 3);

  cfg.output_dir = path("wg");
  cfg.runs = 1;
  EXPECT_EQ(cmd_sweep(cfg, "w_g", {"0.5", "1", "2", "4", "8"}, log_).rows.size(), 5u);
  EXPECT_THROW(cmd_sweep(cfg, "w_g", {}, log_), ConfigError);
  EXPECT_THROW(cmd_sweep(cfg, "t_prime", {"1"}, log_), ConfigError);
}

#ifdef FEATINV_CLI
namespace {

int run_cli(const std::string& args) {
  const int status = std::system((std::string(FEATINV_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_F(CommandsTest, CliExitCodes) {
  const auto bb = path("bb.pt").string();
  EXPECT_EQ(run_cli("generate --backbone " + bb + " --target " + path("img0.fvec").string() +
                    " --k-early 1 --k-late 1 --t-prime 0 -o " + path("cli_ok").string()),
            0);
  EXPECT_TRUE(fs::exists(path("cli_ok/run_000/best.png")));
  EXPECT_EQ(run_cli("generate --config " + path("missing.json").string()), 2);
  EXPECT_EQ(run_cli("generate --backbone " + bb + " --target " + path("img0.fvec").string() + " --w-g -1"), 2);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  write_feature(path("huge.fvec"), FeatureVector(std::vector<double>(12, 1e200), "analytic-meanpool-2x2"));
  EXPECT_EQ(run_cli("generate --backbone " + bb + " --target " + path("huge.fvec").string() +
                    " --k-early 1 --k-late 1 -o " + path("cli_fail").string()),
            1);
  EXPECT_EQ(run_cli("analyze run " + path("cli_ok/run_000").string()), 0);
  EXPECT_EQ(run_cli("encode " + path("img0.png").string() + " -o " + path("cli_enc").string()), 0);
  EXPECT_EQ(std::system(("FEATINV_DEVICE=cuda " + std::string(FEATINV_CLI) + " encode " + path("img0.png").string() +
                         " -o " + path("cli_enc2").string() + " >/dev/null 2>&1")
                            .c_str()) >> 8,
            2);
}
#endif
