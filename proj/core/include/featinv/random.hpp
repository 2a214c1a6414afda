#pragma once

#include <cstdint>
#include <mutex>

#include <torch/torch.h>

namespace featinv {

/// Mixes a base seed with a stream index (splitmix64 finalizer) so each run of
/// a batch owns an independent, reproducible generator.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

torch::Generator make_generator(std::uint64_t seed);

/// Serializes code that seeds torch's global generator (module weight init).
std::unique_lock<std::mutex> lock_global_rng(std::uint64_t seed);

}  // namespace featinv
