#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace featinv {

/// Channels x height x width of a single (unbatched) image or latent.
struct ImageShape {
  std::int64_t channels = 3;
  std::int64_t height = 32;
  std::int64_t width = 32;

  std::vector<std::int64_t> sizes() const { return {channels, height, width}; }
  std::int64_t numel() const { return channels * height * width; }
  bool matches(const torch::Tensor& t) const { return t.sizes() == torch::IntArrayRef(sizes()); }
  std::string str() const;

  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Throws std::invalid_argument naming `what` when the tensor is not shaped `shape`.
void require_shape(const torch::Tensor& t, const ImageShape& shape, const char* what);

}  // namespace featinv
