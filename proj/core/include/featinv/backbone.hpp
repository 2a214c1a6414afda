#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "featinv/dataset.hpp"
#include "featinv/image_shape.hpp"
#include "featinv/schedule.hpp"
#include "featinv/unet.hpp"

namespace featinv {

/// Opaque conditioning passed through to adapters (e.g. an empty-prompt
/// text embedding for a text-conditional latent model).
using Conditioning = std::optional<torch::Tensor>;

/// A pre-trained diffusion model seen by the guidance engine: a noise
/// predictor over latents plus a decoder from clean latents to images.
///
/// Latents and images are unbatched (C x H x W). Both predict_noise and
/// decode must be differentiable with respect to their tensor input.
class DiffusionBackbone {
 public:
  virtual ~DiffusionBackbone() = default;

  virtual ImageShape latent_shape() const = 0;
  virtual ImageShape image_shape() const = 0;
  virtual const VarianceSchedule& schedule() const = 0;

  virtual torch::Tensor predict_noise(const torch::Tensor& z_t, int t, const Conditioning& cond = std::nullopt) const = 0;
  virtual torch::Tensor decode(const torch::Tensor& z0_hat) const = 0;

  /// Whether concurrent calls from several runs are safe. Runs serialize on
  /// non-reentrant backbones.
  virtual bool reentrant() const { return true; }
  virtual std::string describe() const = 0;
};

/// Clean-latent estimate (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
/// Differentiable through both tensors. Throws std::domain_error if
/// sqrt(abar_t) underflows or the result is not finite.
torch::Tensor predict_clean(const torch::Tensor& z_t, int t, const torch::Tensor& eps_hat,
                            const VarianceSchedule& sched);

/// Pixel-space backbone around the toy UNet. decode is the identity.
class ToyBackbone final : public DiffusionBackbone {
 public:
  ToyBackbone(UNet net, VarianceSchedule schedule, ImageShape shape);

  ImageShape latent_shape() const override { return shape_; }
  ImageShape image_shape() const override { return shape_; }
  const VarianceSchedule& schedule() const override { return schedule_; }

  torch::Tensor predict_noise(const torch::Tensor& z_t, int t, const Conditioning& cond = std::nullopt) const override;
  torch::Tensor decode(const torch::Tensor& z0_hat) const override;
  std::string describe() const override;

  /// Batched noise prediction used by training and benchmarks.
  torch::Tensor predict_noise_batch(const torch::Tensor& z_t, const torch::Tensor& t) const;

  UNet network() const { return net_; }

 private:
  mutable UNet net_;
  VarianceSchedule schedule_;
  ImageShape shape_;
};

struct BackboneTrainConfig {
  UNetConfig unet;
  std::int64_t epochs = 60;
  std::int64_t batch_size = 32;
  double learning_rate = 1e-3;
  double ema_decay = 0.995;
  std::uint64_t seed = 0;
  /// Invoked once per epoch with (epoch, mean loss).
  std::function<void(std::int64_t, double)> on_epoch;
};

struct BackboneTrainReport {
  std::vector<double> epoch_losses;
  std::int64_t steps = 0;
};

struct TrainedBackbone {
  std::shared_ptr<ToyBackbone> backbone;
  BackboneTrainReport report;
};

/// Trains the toy denoiser with the standard noise-prediction objective and
/// returns the exponential moving average of its weights. Deterministic for a
/// fixed seed. Throws RunError on a non-finite loss, std::invalid_argument on
/// an empty dataset.
TrainedBackbone train_toy_backbone(const LabeledImages& dataset, const VarianceSchedule& sched,
                                   const BackboneTrainConfig& cfg);

/// Constructs a backbone with freshly initialized (untrained) weights.
std::shared_ptr<ToyBackbone> make_toy_backbone(const UNetConfig& cfg, VarianceSchedule sched, ImageShape shape,
                                               std::uint64_t seed);

// Single-file checkpoint: a torch archive carrying the architecture, the
// schedule, the image shape and the weights.
void save_backbone(const std::filesystem::path& path, const ToyBackbone& backbone);
std::shared_ptr<ToyBackbone> load_backbone(const std::filesystem::path& path);

}  // namespace featinv
