#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "featinv/guidance.hpp"
#include "featinv/random.hpp"
#include "featinv/trace_io.hpp"
#include "support.hpp"

using namespace featinv;
using featinv::test::ScratchDir;
using featinv::test::tiny_backbone;

TEST(FeatureLoss, Examples) {
  const FeatureVector a({1.0, 0.0}, "x"), b({0.0, 1.0}, "x");
  EXPECT_EQ(feature_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(feature_loss(a, b), 2.0);
  const auto fx = torch::tensor({1.0, -2.0, 0.5}, torch::kFloat64).requires_grad_(true);
  const auto fs = torch::tensor({0.0, 1.0, 0.5}, torch::kFloat64);
  const auto g = torch::autograd::grad({feature_loss(fx, fs)}, {fx})[0];
  EXPECT_TRUE(torch::allclose(g, 2 * (fx.detach() - fs)));
}

TEST(NormalizeGradient, NormContractAndDirection) {
  auto grad = torch::zeros({10}, torch::kFloat64);
  grad[0] = 6.0;
  grad[1] = 8.0;  // norm 10
  auto eps = torch::zeros({10}, torch::kFloat64);
  eps[2] = 3.0;
  eps[3] = 4.0;  // norm 5
  const auto out = normalize_gradient(grad, eps);
  EXPECT_FALSE(out.zero_gradient);
  EXPECT_NEAR(out.value.norm().item<double>(), 5.0, 5e-6);
  const double cosine = (out.value * grad).sum().item<double>() / (out.value.norm() * grad.norm()).item<double>();
  EXPECT_NEAR(cosine, 1.0, 1e-12);
}

TEST(NormalizeGradient, FixedPointAndZero) {
  auto gen = make_generator(1);
  const auto g = torch::randn({3, 4, 4}, gen);
  EXPECT_TRUE(torch::allclose(normalize_gradient(g, g).value, g, 1e-6, 0.0));
  const auto z = normalize_gradient(torch::zeros({3, 4, 4}), g);
  EXPECT_TRUE(z.zero_gradient);
  EXPECT_EQ(z.value.abs().max().item<double>(), 0.0);
}

TEST(NormalizeGradient, RandomNormsWithinTolerance) {
  auto gen = make_generator(2);
  for (int i = 0; i < 50; ++i) {
    const auto g = torch::randn({3, 8, 8}, gen) * std::pow(10.0, i % 7 - 3);
    const auto e = torch::randn({3, 8, 8}, gen);
    const double want = e.to(torch::kFloat64).norm().item<double>();
    const double got = normalize_gradient(g, e).value.to(torch::kFloat64).norm().item<double>();
    EXPECT_NEAR(got / want, 1.0, 1e-6);
  }
}

namespace {

double population_std_oracle(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

}  // namespace

TEST(ClipGradient, ThreeElementOracle) {
  const auto out = clip_gradient(torch::tensor({-5.0, 0.0, 5.0}, torch::kFloat64), 1.0);
  const double std = population_std_oracle({-5.0, 0.0, 5.0});  // sqrt(50/3)
  EXPECT_NEAR(out.threshold, std, 1e-12);
  EXPECT_NEAR(out.value[0].item<double>(), -std, 1e-12);
  EXPECT_EQ(out.value[1].item<double>(), 0.0);
  EXPECT_NEAR(out.value[2].item<double>(), std, 1e-12);
  EXPECT_EQ(out.clipped, 2);
}

TEST(ClipGradient, GaussianTail) {
  auto gen = make_generator(3);
  const auto g = torch::randn({100000}, gen, torch::kFloat64);
  const auto out = clip_gradient(g, 3.0);
  std::vector<double> v(g.data_ptr<double>(), g.data_ptr<double>() + g.numel());
  EXPECT_NEAR(out.threshold, 3.0 * population_std_oracle(v), 1e-9);
  EXPECT_LE(out.value.abs().max().item<double>(), out.threshold);
  // Two-sided tail beyond 3 sigma is 0.27%; allow sampling slack.
  EXPECT_LT(static_cast<double>(out.clipped) / 100000.0, 0.0035);
  const auto inside = g.abs().le(out.threshold);
  EXPECT_TRUE(torch::equal(out.value.masked_select(inside), g.masked_select(inside)));
}

TEST(ClipGradient, ConstantGradientClipsToZero) {
  const auto out = clip_gradient(torch::full({3, 2, 2}, 0.7), 3.0);
  EXPECT_TRUE(out.degenerate_std);
  EXPECT_EQ(out.threshold, 0.0);
  EXPECT_EQ(out.value.abs().max().item<double>(), 0.0);
}

TEST(ModifyNoise, Examples) {
  const auto eps = torch::ones({2, 2});
  EXPECT_TRUE(torch::equal(modify_noise(eps, torch::zeros({2, 2}), 4.0), eps));
  EXPECT_TRUE(torch::equal(modify_noise(eps, torch::randn({2, 2}), 0.0), eps));
  EXPECT_TRUE(torch::allclose(modify_noise(eps, torch::full({2, 2}, 0.5), 4.0), torch::full({2, 2}, -1.0)));
  EXPECT_THROW(modify_noise(eps, torch::ones({3}), 1.0), std::invalid_argument);
}

TEST(SamplePrev, ScalarFormulaOracle) {
  const auto s = build_linear_schedule(30, 1e-3, 0.1);
  auto gen = make_generator(4);
  const auto z = torch::randn({2, 3, 3}, gen, torch::kFloat64);
  const auto e = torch::randn({2, 3, 3}, gen, torch::kFloat64);
  for (int t : {1, 2, 15, 30}) {
    auto g1 = make_generator(99);
    auto g2 = make_generator(99);
    const auto out = sample_prev(z, t, e, s, g1).flatten();
    const auto delta = torch::randn({2, 3, 3}, g2, torch::kFloat64).flatten();
    const double a = s.alpha(t), ab = s.alpha_bar(t), b = s.beta(t);
    for (std::int64_t i = 0; i < 18; ++i) {
      const double zi = z.flatten()[i].item<double>(), ei = e.flatten()[i].item<double>();
      double want = (zi - (1.0 - a) / std::sqrt(1.0 - ab) * ei) / std::sqrt(a);
      if (t > 1) want += std::sqrt(b) * delta[i].item<double>();
      EXPECT_NEAR(out[i].item<double>(), want, 1e-12) << "t=" << t;
    }
  }
}

TEST(SamplePrev, FinalStepAddsNoNoise) {
  const auto s = build_linear_schedule(10, 1e-3, 0.1);
  auto gen = make_generator(5);
  const auto state = gen.get_state();
  const auto z = torch::randn({4}, torch::kFloat64);
  const auto out = sample_prev(z, 1, torch::zeros_like(z), s, gen);
  EXPECT_TRUE(torch::allclose(out, z / std::sqrt(s.alpha(1)), 1e-14, 0.0));
  EXPECT_TRUE(torch::equal(gen.get_state(), state));
}

namespace {

struct Moments {
  torch::Tensor mean, var, mean_se, var_se;
};

// Per-coordinate sample moments with standard errors estimated from the
// draws themselves (fourth central moment for the variance).
Moments moments(const torch::Tensor& draws) {
  const double n = static_cast<double>(draws.size(0));
  Moments m;
  m.mean = draws.mean(0);
  const auto c = draws - m.mean;
  m.var = (c * c).mean(0) * (n / (n - 1));
  const auto m4 = (c * c * c * c).mean(0);
  m.mean_se = (m.var / n).sqrt();
  m.var_se = ((m4 - m.var * m.var) / n).sqrt();
  return m;
}

}  // namespace

TEST(SamplePrev, MonteCarloVariance) {
  const auto s = build_linear_schedule(50, 1e-3, 0.1);
  auto gen = make_generator(6);
  const auto z = torch::randn({4}, gen, torch::kFloat64);
  const auto e = torch::randn({4}, gen, torch::kFloat64);
  for (int t : {2, 10, 25, 50}) {
    std::vector<torch::Tensor> draws;
    for (int i = 0; i < 10000; ++i) draws.push_back(sample_prev(z, t, e, s, gen));
    const auto m = moments(torch::stack(draws));
    const auto dev = (m.var - s.beta(t)).abs() / m.var_se;
    EXPECT_LT(dev.max().item<double>(), 3.0) << "t=" << t;
  }
}

TEST(SelfRecur, DeterministicPartAndMonteCarloMoments) {
  const auto s = build_linear_schedule(50, 1e-3, 0.1);
  auto gen = make_generator(7);
  const auto z = torch::randn({4}, gen, torch::kFloat64);
  for (int t : {3, 20, 50}) {
    std::vector<torch::Tensor> draws;
    for (int i = 0; i < 10000; ++i) draws.push_back(self_recur(z, t, s, gen));
    const auto m = moments(torch::stack(draws));
    const auto mean_dev = (m.mean - std::sqrt(s.alpha(t)) * z).abs() / m.mean_se;
    const auto var_dev = (m.var - (1.0 - s.alpha(t))).abs() / m.var_se;
    EXPECT_LT(mean_dev.max().item<double>(), 3.0) << "t=" << t;
    EXPECT_LT(var_dev.max().item<double>(), 3.0) << "t=" << t;
  }
}

TEST(RecurrenceSchedule, Boundaries) {
  GuidanceConfig cfg;
  cfg.k_early = 1000;
  cfg.k_late = 8;
  cfg.t_prime = 5;
  EXPECT_EQ(recurrence_schedule(1000, cfg, 1000), 1000);
  EXPECT_EQ(recurrence_schedule(999, cfg, 1000), 1000);
  EXPECT_EQ(recurrence_schedule(996, cfg, 1000), 1000);
  EXPECT_EQ(recurrence_schedule(995, cfg, 1000), 8);
  EXPECT_EQ(recurrence_schedule(994, cfg, 1000), 8);
  int early = 0;
  for (int t = 1; t <= 1000; ++t) early += recurrence_schedule(t, cfg, 1000) == 1000;
  EXPECT_EQ(early, 5);  // exactly the first t_prime reverse steps
  cfg.t_prime = 0;
  for (int t = 1; t <= 1000; ++t) ASSERT_EQ(recurrence_schedule(t, cfg, 1000), 8);
  EXPECT_THROW(recurrence_schedule(0, cfg, 1000), std::out_of_range);
}

TEST(GuidanceConfig, Validation) {
  GuidanceConfig cfg;
  EXPECT_NO_THROW(cfg.validate(1000));
  auto bad = cfg;
  bad.w_g = -1;
  EXPECT_THROW(bad.validate(1000), ConfigError);
  bad = cfg;
  bad.k_late = 0;
  EXPECT_THROW(bad.validate(1000), ConfigError);
  bad = cfg;
  bad.k_early = 2;
  EXPECT_THROW(bad.validate(1000), ConfigError);
  bad = cfg;
  bad.t_prime = 11;
  EXPECT_THROW(bad.validate(10), ConfigError);
  bad = cfg;
  bad.clip_multiplier = 0;
  EXPECT_THROW(bad.validate(1000), ConfigError);
}

// ---------------------------------------------------------------------------
// The full chain on an untrained tiny backbone.

namespace {

GuidanceConfig desk_config(std::uint64_t seed) {
  GuidanceConfig cfg;
  cfg.w_g = 4.0;
  cfg.k_early = 3;
  cfg.k_late = 2;
  cfg.t_prime = 2;
  cfg.seed = seed;
  return cfg;
}

FeatureVector target_for(const FeatureExtractor& ex, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return ex.extract(virtual_save(torch::rand({3, 8, 8}, gen) * 1.6 - 0.8));
}

class LatentRecorder : public GenerationObserver {
 public:
  void on_latent(const LatentState& s) override {
    z.push_back(s.z.detach().clone());
    t.push_back(s.t);
  }
  std::vector<torch::Tensor> z;
  std::vector<int> t;
};

class FixedExtractor : public FeatureExtractor {
 public:
  explicit FixedExtractor(double value) : value_(value) {}
  const std::string& id() const override { return id_; }
  ImageShape input_shape() const override { return {3, 8, 8}; }
  std::int64_t dim() const override { return 2; }
  torch::Tensor features_batch(const torch::Tensor& images) const override {
    // Depends on the image only through a zero-weight term, so the graph is
    // connected but the gradient vanishes.
    return torch::full({images.size(0), 2}, value_, images.options()) + 0.0 * images.sum({1, 2, 3}).unsqueeze(1);
  }

 private:
  double value_;
  std::string id_ = "fixed";
};

}  // namespace

TEST(Generate, TraceBookkeeping) {
  const auto bb = tiny_backbone();
  const AnalyticExtractor ex({3, 8, 8}, 2);
  const auto cfg = desk_config(3);
  const auto trace = generate(target_for(ex, 1), *bb, ex, cfg);

  // 10 steps: two emphasized with 3 iterations, eight with 2.
  EXPECT_EQ(trace.iterations, 2 * 3 + 8 * 2);
  ASSERT_EQ(trace.records.size(), 23u);
  EXPECT_TRUE(trace.records.back().is_final);
  EXPECT_EQ(trace.records.back().loss, trace.final_distance);

  double min_loss = std::numeric_limits<double>::infinity();
  for (const auto& r : trace.records) min_loss = std::min(min_loss, r.loss);
  EXPECT_EQ(trace.best_distance, min_loss);
  EXPECT_LE(trace.best_distance, trace.final_distance);

  // The stored best image reproduces the best distance.
  const auto target = target_for(ex, 1);
  EXPECT_NEAR(feature_loss(ex.extract(trace.best_image), target), trace.best_distance,
              1e-6 * std::max(1.0, trace.best_distance));
  EXPECT_NEAR(feature_loss(ex.extract(trace.final_image), target), trace.final_distance,
              1e-6 * std::max(1.0, trace.final_distance));

  const auto contracts = check_trace_contracts(trace.records, cfg.clip_multiplier);
  EXPECT_TRUE(contracts.ok()) << contracts.worst_norm_rel_error << " " << contracts.worst_clip_excess;
  EXPECT_EQ(contracts.checked, 22u);
}

TEST(Generate, DeterministicForASeed) {
  const auto bb = tiny_backbone();
  const AnalyticExtractor ex({3, 8, 8}, 2);
  const auto a = generate(target_for(ex, 1), *bb, ex, desk_config(8));
  const auto b = generate(target_for(ex, 1), *bb, ex, desk_config(8));
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].loss, b.records[i].loss);
    EXPECT_EQ(a.records[i].post_clip_max_abs, b.records[i].post_clip_max_abs);
  }
  EXPECT_TRUE(torch::equal(a.best_image.values, b.best_image.values));
  const auto c = generate(target_for(ex, 1), *bb, ex, desk_config(9));
  EXPECT_NE(a.records.front().loss, c.records.front().loss);
}

TEST(Generate, GuidanceOffEqualsAncestralSampling) {
  const auto bb = tiny_backbone(12);
  const AnalyticExtractor ex({3, 8, 8}, 2);
  auto cfg = desk_config(21);
  cfg.w_g = 0.0;
  LatentRecorder guided, plain;
  generate(target_for(ex, 2), *bb, ex, cfg, &guided);
  const auto z0 = ancestral_sample(*bb, cfg, &plain);
  ASSERT_EQ(guided.z.size(), plain.z.size());
  ASSERT_EQ(guided.z.size(), 1u + 2 * 3 + 10 * 2);
  for (std::size_t i = 0; i < guided.z.size(); ++i) {
    EXPECT_EQ(guided.t[i], plain.t[i]);
    ASSERT_TRUE(torch::equal(guided.z[i], plain.z[i])) << "latent " << i;
  }
  EXPECT_TRUE(torch::equal(guided.z.back(), z0));
}

TEST(Generate, ZeroGradientStepsAreFlaggedAndUnguided) {
  const auto bb = tiny_backbone();
  const FixedExtractor ex(3.0);
  auto cfg = desk_config(5);
  const FeatureVector target({1.0, 1.0}, "fixed");
  LatentRecorder guided, plain;
  const auto trace = generate(target, *bb, ex, cfg, &guided);
  EXPECT_EQ(trace.flagged_steps, trace.iterations);
  for (const auto& r : trace.records) {
    if (!r.is_final) EXPECT_TRUE(r.zero_gradient);
  }
  ancestral_sample(*bb, cfg, &plain);
  for (std::size_t i = 0; i < guided.z.size(); ++i) ASSERT_TRUE(torch::equal(guided.z[i], plain.z[i]));
}

TEST(Generate, NonFiniteLossAborts) {
  const auto bb = tiny_backbone();
  const FixedExtractor ex(std::numeric_limits<double>::quiet_NaN());
  const FeatureVector target({1.0, 1.0}, "fixed");
  try {
    generate(target, *bb, ex, desk_config(1));
    FAIL() << "expected GenerationAborted";
  } catch (const GenerationAborted& e) {
    EXPECT_EQ(e.step().t, 10);
    EXPECT_EQ(e.step().k, 1);
  }
}

TEST(Generate, RejectsIncompatibleInputs) {
  const auto bb = tiny_backbone();
  const AnalyticExtractor ex({3, 8, 8}, 2);
  EXPECT_THROW(generate(FeatureVector(std::vector<double>(12, 1.0), "other"), *bb, ex, desk_config(1)),
               std::invalid_argument);
  EXPECT_THROW(generate(FeatureVector(std::vector<double>(3, 1.0), ex.id()), *bb, ex, desk_config(1)),
               std::invalid_argument);
  const AnalyticExtractor wrong({3, 16, 16}, 2);
  EXPECT_THROW(generate(FeatureVector(std::vector<double>(12, 1.0), wrong.id()), *bb, wrong, desk_config(1)),
               std::invalid_argument);
  auto cfg = desk_config(1);
  cfg.t_prime = 11;
  EXPECT_THROW(generate(target_for(ex, 1), *bb, ex, cfg), ConfigError);
}

TEST(TraceFiles, WriterRoundTripAndSummary) {
  ScratchDir dir("trace");
  const auto bb = tiny_backbone();
  const AnalyticExtractor ex({3, 8, 8}, 2);
  GenerationTrace trace;
  {
    TraceWriter writer(dir / "trace.jsonl");
    trace = generate(target_for(ex, 3), *bb, ex, desk_config(4), &writer);
  }
  const auto records = read_trace(dir / "trace.jsonl");
  ASSERT_EQ(records.size(), trace.records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    EXPECT_EQ(records[i].loss, trace.records[i].loss);
    EXPECT_EQ(records[i].normalized_norm, trace.records[i].normalized_norm);
  }
  const auto summary = summarize_trace(records);
  EXPECT_EQ(summary.best_distance, trace.best_distance);
  EXPECT_EQ(summary.best_step, trace.best_step);
  EXPECT_TRUE(summary.has_final);
  EXPECT_EQ(summary.final_distance, trace.final_distance);
  EXPECT_TRUE(check_trace_contracts(records, 3.0).ok());
}

TEST(TraceFiles, StrideKeepsImprovementsAndFinal) {
  const auto bb = tiny_backbone();
  const AnalyticExtractor ex({3, 8, 8}, 2);
  // Unguided, so improvements are rare and the stride decides.
  auto plain = desk_config(6);
  plain.w_g = 0;
  auto cfg = plain;
  cfg.trace_every = 5;
  const auto full = generate(target_for(ex, 3), *bb, ex, plain);
  const auto sparse = generate(target_for(ex, 3), *bb, ex, cfg);
  EXPECT_LT(sparse.records.size(), full.records.size());
  EXPECT_EQ(sparse.best_distance, full.best_distance);
  EXPECT_EQ(summarize_trace(sparse.records).best_distance, sparse.best_distance);
  EXPECT_TRUE(sparse.records.back().is_final);
}
