#include "featinv/quantizer.hpp"

#include <stdexcept>

#include "featinv/image_io.hpp"

namespace featinv {

namespace {
constexpr double kHalfRange = 255.0 / 2.0;
}

ImageShape QuantizedImage::shape() const {
  return {values.size(0), values.size(1), values.size(2)};
}

torch::Tensor QuantizedImage::to_bytes() const {
  return values.detach().to(torch::kUInt8);
}

torch::Tensor round_half_away(const torch::Tensor& x) {
  const auto xd = x.detach().to(torch::kFloat64);
  return (torch::sign(xd) * torch::floor(torch::abs(xd) + 0.5)).to(x.scalar_type());
}

QuantizedImage virtual_save(const torch::Tensor& x) {
  if (!torch::isfinite(x.detach()).all().item<bool>()) {
    throw std::invalid_argument("virtual_save: image contains non-finite values");
  }
  if (x.dim() != 3) {
    throw std::invalid_argument("virtual_save: expected a C x H x W image");
  }
  const auto scaled = (x.clamp(-1.0, 1.0) + 1.0) * kHalfRange;
  // Straight-through: forward value is the rounded grid, backward sees identity.
  const auto rounded = round_half_away(scaled);
  return {scaled + (rounded - scaled.detach()), {-1.0, 1.0}};
}

torch::Tensor unscale(const QuantizedImage& q) {
  return q.values / kHalfRange - 1.0;
}

void save_image(const std::filesystem::path& path, const QuantizedImage& q) {
  write_png(path, q.to_bytes());
}

QuantizedImage load_image(const std::filesystem::path& path) {
  return {read_png(path).to(torch::kFloat32), {-1.0, 1.0}};
}

}  // namespace featinv
