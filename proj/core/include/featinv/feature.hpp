#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace featinv {

/// A feature produced by a named extractor. Values are kept in double
/// precision; the L2 norm is cached at construction.
class FeatureVector {
 public:
  FeatureVector() = default;
  FeatureVector(std::vector<double> values, std::string extractor_id);

  /// Copies a 1-D tensor of any floating dtype.
  static FeatureVector from_tensor(const torch::Tensor& values, std::string extractor_id);

  const std::vector<double>& values() const { return values_; }
  const std::string& extractor_id() const { return extractor_id_; }
  std::size_t dim() const { return values_.size(); }
  double norm() const { return norm_; }

  torch::Tensor to_tensor(torch::Dtype dtype = torch::kFloat32) const;

  /// Throws std::invalid_argument unless both vectors come from the same
  /// extractor and have the same dimension.
  void require_comparable(const FeatureVector& other) const;

  friend bool operator==(const FeatureVector& a, const FeatureVector& b) {
    return a.extractor_id_ == b.extractor_id_ && a.values_ == b.values_;
  }

 private:
  std::vector<double> values_;
  std::string extractor_id_;
  double norm_ = 0.0;
};

// Binary container: magic "FEATVEC1", u32 id length, id bytes, u64 dimension,
// then `dimension` little-endian IEEE-754 doubles.
void write_feature(const std::filesystem::path& path, const FeatureVector& f);
FeatureVector read_feature(const std::filesystem::path& path);

/// One header line `extractor_id,dim` followed by one value per line.
void write_feature_csv(const std::filesystem::path& path, const FeatureVector& f);

}  // namespace featinv
