#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace featinv {

/// Discrete-time diffusion timetable. Timesteps are 1-based: t = 1..T.
/// Tables are stored in double precision and are immutable after
/// construction, so a schedule may be shared freely between runs.
class VarianceSchedule {
 public:
  explicit VarianceSchedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()); }

  double beta(int t) const { return betas_[index(t)]; }
  double alpha(int t) const { return alphas_[index(t)]; }
  /// Cumulative product of alpha_1..alpha_t. alpha_bar(0) is 1 by convention.
  double alpha_bar(int t) const;

  const std::vector<double>& betas() const { return betas_; }

  /// Throws std::out_of_range unless 1 <= t <= T.
  void check_timestep(int t) const;

 private:
  std::size_t index(int t) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

/// Linearly spaced betas over T steps, both endpoints included.
/// Requires T >= 1 and 0 < beta_start <= beta_end < 1.
VarianceSchedule build_linear_schedule(int T, double beta_start, double beta_end);

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps. Differentiable in
/// both tensors; preserves the dtype of z0.
torch::Tensor forward_diffuse(const torch::Tensor& z0, int t, const torch::Tensor& eps,
                              const VarianceSchedule& sched);

}  // namespace featinv
