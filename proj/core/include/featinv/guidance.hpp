#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "featinv/backbone.hpp"
#include "featinv/errors.hpp"
#include "featinv/extractor.hpp"
#include "featinv/feature.hpp"
#include "featinv/quantizer.hpp"
#include "featinv/schedule.hpp"

namespace featinv {

/// Hyperparameters of feature-guided generation. Defaults are the
/// full-scale values used with a 1000-step latent diffusion model; desk-scale
/// runs shrink the recurrence counts.
struct GuidanceConfig {
  double w_g = 4.0;              // gradient weight in the noise update
  int k_early = 1000;            // self-recurrence iterations for emphasized steps
  int k_late = 8;                // ... for all other steps
  int t_prime = 5;               // number of emphasized (first) reverse steps
  double clip_multiplier = 3.0;  // clip threshold = multiplier * std(gradient)
  std::uint64_t seed = 0;
  int trace_every = 1;           // persist every n-th step record

  /// Throws ConfigError on violated bounds. w_g = 0 is accepted: it turns
  /// guidance off and reduces generation to ancestral sampling.
  void validate(int T) const;
};

void to_json(nlohmann::json& j, const GuidanceConfig& cfg);
void from_json(const nlohmann::json& j, GuidanceConfig& cfg);

/// A latent tagged with its timestep and the generator state that follows it.
struct LatentState {
  torch::Tensor z;
  int t = 0;
  torch::Tensor rng_state;
};

/// Scalar diagnostics of one (t, k) iteration. The final decode of z_0 is
/// recorded with t = 0, k = 0 and is_final set.
struct StepRecord {
  int t = 0;
  int k = 0;
  double loss = 0.0;
  // Raw gradient of -loss with respect to z_t (the guidance direction).
  double grad_norm = 0.0;
  double grad_std = 0.0;
  double grad_max_abs = 0.0;
  // After rescaling to the norm of the predicted noise.
  double eps_norm = 0.0;
  double normalized_norm = 0.0;
  double normalized_std = 0.0;
  // After clipping at +-clip_threshold.
  double clip_threshold = 0.0;
  double post_clip_max_abs = 0.0;
  std::int64_t clipped = 0;
  bool zero_gradient = false;
  bool degenerate_std = false;
  bool is_final = false;

  bool flagged() const { return zero_gradient || degenerate_std; }
};

void to_json(nlohmann::json& j, const StepRecord& r);
void from_json(const nlohmann::json& j, StepRecord& r);

struct StepIndex {
  int t = 0;
  int k = 0;
  friend bool operator==(const StepIndex&, const StepIndex&) = default;
};

struct GenerationTrace {
  std::vector<StepRecord> records;
  double best_distance = std::numeric_limits<double>::infinity();
  StepIndex best_step;
  QuantizedImage best_image;
  QuantizedImage final_image;
  double final_distance = std::numeric_limits<double>::infinity();
  std::int64_t iterations = 0;
  std::int64_t flagged_steps = 0;
};

/// Thrown when a run hits a non-finite loss, gradient or latent. Carries the
/// trace accumulated up to the failing step.
class GenerationAborted : public RunError {
 public:
  GenerationAborted(const std::string& what, GenerationTrace partial, StepIndex at)
      : RunError(what), partial_(std::make_shared<GenerationTrace>(std::move(partial))), at_(at) {}
  const GenerationTrace& partial() const { return *partial_; }
  StepIndex step() const { return at_; }

 private:
  std::shared_ptr<GenerationTrace> partial_;
  StepIndex at_;
};

/// Receives progress from generate / ancestral_sample. Called on the
/// generating thread.
class GenerationObserver {
 public:
  virtual ~GenerationObserver() = default;
  /// Every latent the chain visits, starting with z_T.
  virtual void on_latent(const LatentState&) {}
  /// Every persisted step record, in order.
  virtual void on_record(const StepRecord&) {}
};

// --- single operations -----------------------------------------------------

/// Squared Euclidean distance. Throws if the features are not comparable.
double feature_loss(const FeatureVector& f_x, const FeatureVector& f_s);
/// Differentiable variant over tensors of equal shape.
torch::Tensor feature_loss(const torch::Tensor& f_x, const torch::Tensor& f_s);

struct NormalizedGradient {
  torch::Tensor value;
  bool zero_gradient = false;
};

/// Rescales `grad` so its flattened L2 norm equals that of `eps_hat`.
/// A zero gradient yields a zero tensor with zero_gradient set.
NormalizedGradient normalize_gradient(const torch::Tensor& grad, const torch::Tensor& eps_hat);

struct ClippedGradient {
  torch::Tensor value;
  double threshold = 0.0;
  std::int64_t clipped = 0;
  bool degenerate_std = false;
};

/// Clamps every entry to +-(clip_multiplier * std(grad)), with the
/// population standard deviation computed over all entries of this tensor.
/// A constant tensor has threshold 0 and clips to all zeros.
ClippedGradient clip_gradient(const torch::Tensor& grad, double clip_multiplier);

/// eps_hat - w_g * grad_fixed.
torch::Tensor modify_noise(const torch::Tensor& eps_hat, const torch::Tensor& grad_fixed, double w_g);

/// One ancestral step:
///   z_{t-1} = (z_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps') / sqrt(alpha_t) + sqrt(beta_t) * delta
/// with delta ~ N(0, I) drawn from `gen`. At t = 1 no noise is drawn or added.
torch::Tensor sample_prev(const torch::Tensor& z_t, int t, const torch::Tensor& eps_prime,
                          const VarianceSchedule& sched, torch::Generator& gen);

/// One forward step back to noise level t: sqrt(alpha_t) z_{t-1} + sqrt(1 - alpha_t) delta.
torch::Tensor self_recur(const torch::Tensor& z_prev, int t, const VarianceSchedule& sched, torch::Generator& gen);

/// Self-recurrence count for reverse step t: k_early for the first t_prime
/// reverse steps (t > T - t_prime), k_late afterwards.
int recurrence_schedule(int t, const GuidanceConfig& cfg, int T);

// --- the full chain ----------------------------------------------------------

/// Generates an image whose feature approaches `target` by guiding every
/// reverse step with the gradient of the squared feature distance, taken
/// through the noise predictor, the clean-latent estimate, the decoder, the
/// virtual save and the extractor.
GenerationTrace generate(const FeatureVector& target, const DiffusionBackbone& backbone,
                         const FeatureExtractor& extractor, const GuidanceConfig& cfg,
                         GenerationObserver* observer = nullptr);

/// Unguided sampling with the same RNG consumption order and recurrence
/// schedule as generate. Returns z_0.
torch::Tensor ancestral_sample(const DiffusionBackbone& backbone, const GuidanceConfig& cfg,
                               GenerationObserver* observer = nullptr);

}  // namespace featinv
