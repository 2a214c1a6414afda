#pragma once

#include <filesystem>
#include <utility>

#include <torch/torch.h>

#include "featinv/image_shape.hpp"

namespace featinv {

/// An 8-bit image held as real values. Entries are integers in [0, 255].
/// `values` may carry an autograd graph back to the decoder output when it
/// was produced by virtual_save on a tensor that requires grad.
struct QuantizedImage {
  torch::Tensor values;
  std::pair<double, double> source_range{-1.0, 1.0};

  ImageShape shape() const;
  QuantizedImage detached() const { return {values.detach(), source_range}; }
  torch::Tensor to_bytes() const;
};

/// Simulates saving an image to an 8-bit file without leaving the graph.
///
/// Forward: clamp to [-1, 1], map affinely onto [0, 255], round half away
/// from zero. Backward: the rounding Jacobian is the identity, so the
/// gradient is that of the clamp-and-scale map (255/2 inside (-1, 1), zero
/// where the clamp is active). Rejects non-finite input.
QuantizedImage virtual_save(const torch::Tensor& x);

/// Inverse of the affine part of virtual_save: [0, 255] -> [-1, 1].
torch::Tensor unscale(const QuantizedImage& q);

/// Rounds half away from zero, elementwise. Computed in double precision.
torch::Tensor round_half_away(const torch::Tensor& x);

/// Writes the quantized pixels to a lossless PNG file.
void save_image(const std::filesystem::path& path, const QuantizedImage& q);

/// Reads a PNG written by save_image (or any 8-bit gray/RGB PNG).
QuantizedImage load_image(const std::filesystem::path& path);

}  // namespace featinv
