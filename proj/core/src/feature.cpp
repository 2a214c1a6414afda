#include "featinv/feature.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "featinv/errors.hpp"

namespace featinv {

namespace {

constexpr char kMagic[8] = {'F', 'E', 'A', 'T', 'V', 'E', 'C', '1'};

static_assert(std::endian::native == std::endian::little, "feature files assume a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw RunError("truncated feature file " + path.string());
  }
  return value;
}

}  // namespace

FeatureVector::FeatureVector(std::vector<double> values, std::string extractor_id)
    : values_(std::move(values)), extractor_id_(std::move(extractor_id)) {
  double sum = 0.0;
  for (double v : values_) sum += v * v;
  norm_ = std::sqrt(sum);
}

FeatureVector FeatureVector::from_tensor(const torch::Tensor& values, std::string extractor_id) {
  const auto flat = values.detach().to(torch::kFloat64).contiguous().cpu().view(-1);
  const double* p = flat.data_ptr<double>();
  return FeatureVector(std::vector<double>(p, p + flat.numel()), std::move(extractor_id));
}

torch::Tensor FeatureVector::to_tensor(torch::Dtype dtype) const {
  auto t = torch::empty({static_cast<std::int64_t>(values_.size())}, torch::kFloat64);
  std::memcpy(t.data_ptr<double>(), values_.data(), values_.size() * sizeof(double));
  return t.to(dtype);
}

void FeatureVector::require_comparable(const FeatureVector& other) const {
  if (extractor_id_ != other.extractor_id_) {
    throw std::invalid_argument("features come from different extractors: '" + extractor_id_ + "' vs '" +
                                other.extractor_id_ + "'");
  }
  if (values_.size() != other.values_.size()) {
    throw std::invalid_argument("feature dimension mismatch");
  }
}

void write_feature(const std::filesystem::path& path, const FeatureVector& f) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RunError("cannot write feature file " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(f.extractor_id().size()));
  out.write(f.extractor_id().data(), static_cast<std::streamsize>(f.extractor_id().size()));
  put<std::uint64_t>(out, f.dim());
  for (double v : f.values()) put<double>(out, v);
  if (!out) throw RunError("failed writing feature file " + path.string());
}

FeatureVector read_feature(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunError("cannot open feature file " + path.string());
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw RunError(path.string() + " is not a feature file");
  }
  const auto id_len = get<std::uint32_t>(in, path);
  if (id_len > (1u << 16)) throw RunError("implausible extractor id length in " + path.string());
  std::string id(id_len, '\0');
  if (!in.read(id.data(), id_len)) throw RunError("truncated feature file " + path.string());
  const auto dim = get<std::uint64_t>(in, path);
  if (dim > (1ull << 28)) throw RunError("implausible feature dimension in " + path.string());
  std::vector<double> values(dim);
  for (auto& v : values) v = get<double>(in, path);
  return FeatureVector(std::move(values), std::move(id));
}

void write_feature_csv(const std::filesystem::path& path, const FeatureVector& f) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RunError("cannot write " + path.string());
  out << f.extractor_id() << "," << f.dim() << "\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (double v : f.values()) out << v << "\n";
}

}  // namespace featinv
