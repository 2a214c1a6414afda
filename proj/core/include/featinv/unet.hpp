#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

namespace featinv {

/// Shape of the toy noise-prediction network. The spatial size must be
/// divisible by 2^(channel_mults.size() - 1).
struct UNetConfig {
  std::int64_t image_channels = 3;
  std::int64_t base_channels = 16;
  std::vector<std::int64_t> channel_mults{1, 2, 2};
  std::int64_t time_dim = 64;
};

void to_json(nlohmann::json& j, const UNetConfig& cfg);
void from_json(const nlohmann::json& j, UNetConfig& cfg);

// Residual block with GroupNorm/SiLU and an additive timestep projection.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Small U-shaped convolutional denoiser with a sinusoidal timestep embedding.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const UNetConfig& cfg);

  /// x: B x C x H x W, t: B integer timesteps (1-based). Returns predicted noise.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t);

  const UNetConfig& config() const { return cfg_; }

 private:
  torch::Tensor embed_time(const torch::Tensor& t) const;

  UNetConfig cfg_;
  torch::nn::Linear time_fc1_{nullptr}, time_fc2_{nullptr};
  torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::ModuleList down_blocks_, downsamples_, up_blocks_, upsamples_;
  ResBlock mid_{nullptr};
};
TORCH_MODULE(UNet);

/// Number of trainable scalars in a module.
std::int64_t parameter_count(const torch::nn::Module& module);

}  // namespace featinv
