#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "featinv/dataset.hpp"
#include "featinv/feature.hpp"
#include "featinv/image_shape.hpp"
#include "featinv/quantizer.hpp"

namespace featinv {

/// The encoder whose feature space is being analyzed.
///
/// Extractors consume 8-bit images (values in [0, 255], C x H x W) and own
/// any preprocessing behind features_batch. They run in evaluation mode:
/// deterministic, and differentiable with respect to the input pixels.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual const std::string& id() const = 0;
  virtual ImageShape input_shape() const = 0;
  virtual std::int64_t dim() const = 0;

  /// N x C x H x W in [0, 255] -> N x D. Differentiable.
  virtual torch::Tensor features_batch(const torch::Tensor& images) const = 0;
  virtual bool reentrant() const { return true; }

  /// Single image -> D-vector, differentiable.
  torch::Tensor features(const torch::Tensor& image) const;

  /// Validated, gradient-free extraction. Throws std::invalid_argument on a
  /// shape mismatch or pixels outside [0, 255].
  FeatureVector extract(const QuantizedImage& image) const;
};

/// Per-channel mean over a grid x grid partition of the image: D = C * grid^2.
/// Its Jacobian is constant, which makes the guidance gradient exactly
/// checkable.
class AnalyticExtractor final : public FeatureExtractor {
 public:
  explicit AnalyticExtractor(ImageShape input, std::int64_t grid = 2);

  const std::string& id() const override { return id_; }
  ImageShape input_shape() const override { return input_; }
  std::int64_t dim() const override { return input_.channels * grid_ * grid_; }
  torch::Tensor features_batch(const torch::Tensor& images) const override;

 private:
  ImageShape input_;
  std::int64_t grid_;
  std::string id_;
};

struct CnnConfig {
  std::int64_t image_channels = 3;
  std::int64_t image_size = 32;
  std::int64_t base_channels = 16;
  std::int64_t num_classes = 4;
};

void to_json(nlohmann::json& j, const CnnConfig& cfg);
void from_json(const nlohmann::json& j, CnnConfig& cfg);

/// Small convolutional classifier. The feature is the globally pooled output
/// of the last convolutional stage, i.e. the input of the final linear layer.
class ShapeClassifierImpl : public torch::nn::Module {
 public:
  explicit ShapeClassifierImpl(const CnnConfig& cfg);

  /// images in [0, 255]; returns N x feature_dim.
  torch::Tensor embed(const torch::Tensor& images);
  torch::Tensor classify(const torch::Tensor& embedding);

  std::int64_t feature_dim() const { return 4 * cfg_.base_channels; }
  const CnnConfig& config() const { return cfg_; }

 private:
  CnnConfig cfg_;
  torch::nn::Sequential trunk_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ShapeClassifier);

class CnnExtractor final : public FeatureExtractor {
 public:
  CnnExtractor(ShapeClassifier net, std::string id);

  const std::string& id() const override { return id_; }
  ImageShape input_shape() const override;
  std::int64_t dim() const override { return net_->feature_dim(); }
  torch::Tensor features_batch(const torch::Tensor& images) const override;

  /// Class predictions for N x C x H x W images in [0, 255].
  torch::Tensor predict(const torch::Tensor& images) const;
  ShapeClassifier network() const { return net_; }

 private:
  mutable ShapeClassifier net_;
  std::string id_;
};

struct ExtractorTrainConfig {
  CnnConfig cnn;
  std::int64_t epochs = 16;
  std::int64_t batch_size = 64;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
  std::function<void(std::int64_t, double)> on_epoch;
};

struct TrainedExtractor {
  std::shared_ptr<CnnExtractor> extractor;
  std::vector<double> epoch_losses;
  double train_accuracy = 0.0;
};

/// Fits the classifier on labeled images in [-1, 1] (the dataset's native
/// range; converted to 8-bit pixels internally). Deterministic for a seed.
/// Throws RunError if training diverges.
TrainedExtractor train_toy_extractor(const LabeledImages& train, const ExtractorTrainConfig& cfg);

/// Fraction of correctly classified images (dataset range [-1, 1]).
double classification_accuracy(const CnnExtractor& extractor, const LabeledImages& data);

/// Converts dataset images in [-1, 1] to the 8-bit pixel grid.
torch::Tensor to_pixels(const torch::Tensor& images);

/// The checkpoint carries architecture and id; the id is derived from a
/// digest of the weights so that features are tied to the exact network.
void save_extractor(const std::filesystem::path& path, const CnnExtractor& extractor);
std::shared_ptr<CnnExtractor> load_extractor(const std::filesystem::path& path);

}  // namespace featinv
