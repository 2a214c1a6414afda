#include "featinv/unet.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace featinv {

namespace nn = torch::nn;

namespace {

std::int64_t group_count(std::int64_t channels) {
  return std::gcd(channels, std::int64_t{8});
}

nn::Conv2d conv3x3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

void to_json(nlohmann::json& j, const UNetConfig& cfg) {
  j = nlohmann::json{{"image_channels", cfg.image_channels},
                     {"base_channels", cfg.base_channels},
                     {"channel_mults", cfg.channel_mults},
                     {"time_dim", cfg.time_dim}};
}

void from_json(const nlohmann::json& j, UNetConfig& cfg) {
  cfg.image_channels = j.value("image_channels", cfg.image_channels);
  cfg.base_channels = j.value("base_channels", cfg.base_channels);
  cfg.channel_mults = j.value("channel_mults", cfg.channel_mults);
  cfg.time_dim = j.value("time_dim", cfg.time_dim);
}

ResBlockImpl::ResBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t time_dim) {
  norm1_ = register_module("norm1", nn::GroupNorm(group_count(in_ch), in_ch));
  conv1_ = register_module("conv1", conv3x3(in_ch, out_ch));
  time_proj_ = register_module("time_proj", nn::Linear(time_dim, out_ch));
  norm2_ = register_module("norm2", nn::GroupNorm(group_count(out_ch), out_ch));
  conv2_ = register_module("conv2", conv3x3(out_ch, out_ch));
  if (in_ch != out_ch) {
    skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = h + time_proj_(temb).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(torch::silu(norm2_(h)));
  return h + (skip_ ? skip_(x) : x);
}

UNetImpl::UNetImpl(const UNetConfig& cfg) : cfg_(cfg) {
  if (cfg.channel_mults.empty()) throw std::invalid_argument("UNet needs at least one resolution level");
  if (cfg.time_dim % 2 != 0) throw std::invalid_argument("UNet time_dim must be even");
  const std::int64_t temb_dim = 2 * cfg.time_dim;
  time_fc1_ = register_module("time_fc1", nn::Linear(cfg.time_dim, temb_dim));
  time_fc2_ = register_module("time_fc2", nn::Linear(temb_dim, temb_dim));

  std::vector<std::int64_t> widths;
  for (auto m : cfg.channel_mults) widths.push_back(cfg.base_channels * m);
  const auto levels = widths.size();

  conv_in_ = register_module("conv_in", conv3x3(cfg.image_channels, widths[0]));
  std::int64_t prev = widths[0];
  for (std::size_t i = 0; i < levels; ++i) {
    down_blocks_->push_back(ResBlock(prev, widths[i], temb_dim));
    prev = widths[i];
    if (i + 1 < levels) downsamples_->push_back(conv3x3(prev, prev, 2));
  }
  mid_ = register_module("mid", ResBlock(prev, prev, temb_dim));
  // Built in decoder order (deepest first).
  for (std::size_t r = 0; r < levels; ++r) {
    const std::size_t i = levels - 1 - r;
    up_blocks_->push_back(ResBlock(prev + widths[i], widths[i], temb_dim));
    prev = widths[i];
    if (i > 0) upsamples_->push_back(conv3x3(prev, prev));
  }
  register_module("down_blocks", down_blocks_);
  register_module("downsamples", downsamples_);
  register_module("up_blocks", up_blocks_);
  register_module("upsamples", upsamples_);
  norm_out_ = register_module("norm_out", nn::GroupNorm(group_count(prev), prev));
  conv_out_ = register_module("conv_out", conv3x3(prev, cfg.image_channels));
  torch::NoGradGuard no_grad;
  conv_out_->weight.zero_();
  conv_out_->bias.zero_();
}

torch::Tensor UNetImpl::embed_time(const torch::Tensor& t) const {
  const auto half = cfg_.time_dim / 2;
  const auto freqs =
      torch::exp(-std::log(10000.0) * torch::arange(half, torch::TensorOptions().dtype(torch::kFloat64)) / half);
  const auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t) {
  const auto dtype = x.scalar_type();
  auto temb = embed_time(t).to(x.device(), dtype);
  temb = time_fc2_(torch::silu(time_fc1_(temb)));

  auto h = conv_in_(x);
  std::vector<torch::Tensor> skips;
  const auto levels = down_blocks_->size();
  for (std::size_t i = 0; i < levels; ++i) {
    h = down_blocks_[i]->as<ResBlock>()->forward(h, temb);
    skips.push_back(h);
    if (i + 1 < levels) h = downsamples_[i]->as<nn::Conv2d>()->forward(h);
  }
  h = mid_(h, temb);
  std::size_t up = 0;
  for (std::size_t r = 0; r < levels; ++r) {
    h = torch::cat({h, skips.back()}, 1);
    skips.pop_back();
    h = up_blocks_[r]->as<ResBlock>()->forward(h, temb);
    if (r + 1 < levels) {
      h = torch::upsample_nearest2d(h, std::vector<std::int64_t>{h.size(2) * 2, h.size(3) * 2});
      h = upsamples_[up++]->as<nn::Conv2d>()->forward(h);
    }
  }
  return conv_out_(torch::silu(norm_out_(h)));
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace featinv
