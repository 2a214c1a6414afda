#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>

#include <torch/torch.h>

#include "featinv/backbone.hpp"
#include "featinv/extractor.hpp"
#include "featinv/feature.hpp"
#include "featinv/random.hpp"
#include "featinv/schedule.hpp"

namespace featinv::test {

// A directory under the build tree that is wiped on construction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& name) : path_(std::filesystem::temp_directory_path() / ("featinv_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

inline UNetConfig tiny_unet(std::int64_t channels = 3) {
  UNetConfig cfg;
  cfg.image_channels = channels;
  cfg.base_channels = 8;
  cfg.channel_mults = {1, 2};
  cfg.time_dim = 16;
  return cfg;
}

// Untrained pixel-space backbone on small images; enough to exercise the
// guidance loop, which is correct for any noise predictor.
// The output layer starts at zero, which would make the predicted noise (and
// with it the normalized guidance) vanish; give it small random weights.
inline void randomize_output(const ToyBackbone& bb, std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator(seed);
  for (auto& p : bb.network()->named_parameters()) {
    if (p.key().rfind("conv_out", 0) == 0) p.value().copy_(torch::randn(p.value().sizes(), gen) * 0.05);
  }
}

inline std::shared_ptr<ToyBackbone> tiny_backbone(int T = 10, ImageShape shape = {3, 8, 8}, std::uint64_t seed = 1) {
  auto bb = make_toy_backbone(tiny_unet(shape.channels), build_linear_schedule(T, 1e-3, 0.1), shape, seed);
  randomize_output(*bb, seed);
  return bb;
}

inline FeatureVector random_feature(std::mt19937_64& rng, std::size_t dim, const std::string& id,
                                    double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(dim);
  for (auto& x : v) x = n(rng);
  return FeatureVector(std::move(v), id);
}

}  // namespace featinv::test
