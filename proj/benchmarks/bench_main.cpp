#include <random>

#include <benchmark/benchmark.h>

#include "featinv/analysis.hpp"
#include "featinv/backbone.hpp"
#include "featinv/extractor.hpp"
#include "featinv/guidance.hpp"
#include "featinv/quantizer.hpp"
#include "featinv/random.hpp"

using namespace featinv;

namespace {

std::shared_ptr<ToyBackbone> bench_backbone(std::int64_t size) {
  return make_toy_backbone(UNetConfig{}, build_linear_schedule(100, 1e-3, 0.1), {3, size, size}, 1);
}

void BM_PredictNoise(benchmark::State& state) {
  const auto bb = bench_backbone(state.range(0));
  auto gen = make_generator(1);
  const auto z = torch::randn({3, state.range(0), state.range(0)}, gen);
  torch::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(bb->predict_noise(z, 50));
}
BENCHMARK(BM_PredictNoise)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

// One guided reverse step without recurrence (k = 1).
void BM_GuidedStep(benchmark::State& state) {
  const auto bb = bench_backbone(32);
  const AnalyticExtractor ex({3, 32, 32}, 2);
  const FeatureVector target(std::vector<double>(ex.dim(), 120.0), ex.id());
  GuidanceConfig cfg;
  cfg.k_early = cfg.k_late = 1;
  cfg.t_prime = 0;
  const auto& sched = bb->schedule();
  for (auto _ : state) {
    auto gen = make_generator(cfg.seed);
    auto z = torch::randn({3, 32, 32}, gen).requires_grad_(true);
    const auto eps = bb->predict_noise(z, sched.steps());
    const auto x = bb->decode(predict_clean(z, sched.steps(), eps, sched));
    const auto loss = feature_loss(ex.features(virtual_save(x).values), target.to_tensor());
    const auto g = torch::autograd::grad({loss}, {z})[0];
    const auto clipped = clip_gradient(normalize_gradient(g, eps.detach()).value, cfg.clip_multiplier);
    benchmark::DoNotOptimize(
        sample_prev(z.detach(), sched.steps(), modify_noise(eps.detach(), clipped.value, cfg.w_g), sched, gen));
  }
}
BENCHMARK(BM_GuidedStep)->Unit(benchmark::kMillisecond);

void BM_VirtualSave(benchmark::State& state) {
  auto gen = make_generator(2);
  const auto x = torch::randn({3, state.range(0), state.range(0)}, gen).requires_grad_(true);
  for (auto _ : state) benchmark::DoNotOptimize(virtual_save(x).values);
}
BENCHMARK(BM_VirtualSave)->Arg(32)->Arg(256);

void BM_PairwiseDistances(benchmark::State& state) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<FeatureVector> fs;
  for (int i = 0; i < state.range(0); ++i) {
    std::vector<double> v(512);
    for (auto& x : v) x = n(rng);
    fs.emplace_back(std::move(v), "bench");
  }
  for (auto _ : state) benchmark::DoNotOptimize(pairwise_squared_distances(fs));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_PairwiseDistances)->RangeMultiplier(4)->Range(16, 256)->Complexity(benchmark::oNSquared);

}  // namespace

BENCHMARK_MAIN();
