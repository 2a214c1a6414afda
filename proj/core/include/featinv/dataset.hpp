#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "featinv/image_shape.hpp"

namespace featinv {

/// Procedural dataset of colored geometric primitives on varied backgrounds.
struct ShapesConfig {
  std::int64_t size = 32;
  std::int64_t channels = 3;
  std::uint64_t seed = 0;
};

/// Images are N x C x H x W float32 in [-1, 1], always lying exactly on the
/// 8-bit grid so that writing and re-reading them is lossless.
struct LabeledImages {
  torch::Tensor images;
  std::vector<std::int64_t> labels;
  std::vector<std::string> class_names;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  ImageShape shape() const { return {images.size(1), images.size(2), images.size(3)}; }
  /// Rows whose label equals `label`, in dataset order.
  LabeledImages select_class(std::int64_t label) const;
  LabeledImages slice(std::int64_t begin, std::int64_t end) const;
};

const std::vector<std::string>& shape_class_names();

LabeledImages generate_shapes(std::int64_t count, const ShapesConfig& cfg);

/// Writes img_00000.png ... plus manifest.json ({classes, shape, seed, items}).
void write_dataset(const std::filesystem::path& dir, const LabeledImages& data, const ShapesConfig& cfg);
LabeledImages load_dataset(const std::filesystem::path& dir);

}  // namespace featinv
