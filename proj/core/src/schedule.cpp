#include "featinv/schedule.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace featinv {

VarianceSchedule::VarianceSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) {
    throw std::invalid_argument("variance schedule needs at least one step");
  }
  alphas_.reserve(betas_.size());
  alpha_bars_.reserve(betas_.size());
  double running = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    const double b = betas_[i];
    if (!(b > 0.0 && b < 1.0)) {
      std::ostringstream msg;
      msg << "beta_" << (i + 1) << " = " << b << " is outside (0, 1)";
      throw std::invalid_argument(msg.str());
    }
    alphas_.push_back(1.0 - b);
    running *= alphas_.back();
    alpha_bars_.push_back(running);
  }
}

double VarianceSchedule::alpha_bar(int t) const {
  if (t == 0) {
    return 1.0;
  }
  return alpha_bars_[index(t)];
}

void VarianceSchedule::check_timestep(int t) const {
  if (t < 1 || t > steps()) {
    std::ostringstream msg;
    msg << "timestep " << t << " outside [1, " << steps() << "]";
    throw std::out_of_range(msg.str());
  }
}

std::size_t VarianceSchedule::index(int t) const {
  check_timestep(t);
  return static_cast<std::size_t>(t - 1);
}

VarianceSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) {
    throw std::invalid_argument("schedule length must be positive");
  }
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    std::ostringstream msg;
    msg << "need 0 < beta_start <= beta_end < 1, got [" << beta_start << ", " << beta_end << "]";
    throw std::invalid_argument(msg.str());
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  if (T == 1) {
    betas[0] = beta_start;
  } else {
    const double step = (beta_end - beta_start) / static_cast<double>(T - 1);
    for (int i = 0; i < T; ++i) {
      betas[static_cast<std::size_t>(i)] = beta_start + step * static_cast<double>(i);
    }
    betas.back() = beta_end;
  }
  return VarianceSchedule(std::move(betas));
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, int t, const torch::Tensor& eps,
                              const VarianceSchedule& sched) {
  sched.check_timestep(t);
  if (z0.sizes() != eps.sizes()) {
    throw std::invalid_argument("forward_diffuse: noise shape does not match latent shape");
  }
  const double ab = sched.alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

}  // namespace featinv
