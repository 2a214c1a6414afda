#pragma once

#include <filesystem>

#include <torch/torch.h>

namespace featinv {

// PNG codec for uint8 tensors laid out C x H x W with C in {1, 3}.
void write_png(const std::filesystem::path& path, const torch::Tensor& chw_u8);
torch::Tensor read_png(const std::filesystem::path& path);

}  // namespace featinv
