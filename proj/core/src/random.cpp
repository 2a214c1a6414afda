#include "featinv/random.hpp"

#include <ATen/CPUGeneratorImpl.h>

namespace featinv {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

torch::Generator make_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

std::unique_lock<std::mutex> lock_global_rng(std::uint64_t seed) {
  static std::mutex mutex;
  std::unique_lock<std::mutex> lock(mutex);
  torch::manual_seed(seed);
  return lock;
}

}  // namespace featinv
