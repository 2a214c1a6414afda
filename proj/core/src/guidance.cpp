#include "featinv/guidance.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "featinv/random.hpp"

namespace featinv {

namespace {

bool all_finite(const torch::Tensor& t) { return torch::isfinite(t.detach()).all().item<bool>(); }

double population_std(const torch::Tensor& x) {
  const auto centered = x - x.mean();
  return std::sqrt((centered * centered).mean().item<double>());
}

double l2(const torch::Tensor& x) { return x.to(torch::kFloat64).norm().item<double>(); }

double max_abs(const torch::Tensor& x) { return x.abs().max().item<double>(); }

void check_compatible(const FeatureVector& target, const DiffusionBackbone& backbone,
                      const FeatureExtractor& extractor) {
  if (target.extractor_id() != extractor.id()) {
    throw std::invalid_argument("target feature was produced by '" + target.extractor_id() +
                                "' but the extractor is '" + extractor.id() + "'");
  }
  if (static_cast<std::int64_t>(target.dim()) != extractor.dim()) {
    throw std::invalid_argument("target feature dimension does not match the extractor");
  }
  if (!(backbone.image_shape() == extractor.input_shape())) {
    throw std::invalid_argument("backbone images are " + backbone.image_shape().str() + " but the extractor expects " +
                                extractor.input_shape().str());
  }
}

// Bookkeeping shared by every evaluated image (intermediate or final).
class TraceBuilder {
 public:
  TraceBuilder(int stride, GenerationObserver* observer) : stride_(stride), observer_(observer) {}

  void add(const StepRecord& rec, const QuantizedImage& image) {
    const bool improved = rec.loss < trace_.best_distance;
    if (improved) {
      trace_.best_distance = rec.loss;
      trace_.best_step = {rec.t, rec.k};
      trace_.best_image = image.detached();
    }
    if (rec.flagged()) ++trace_.flagged_steps;
    const bool keep = rec.is_final || improved || rec.flagged() || trace_.iterations % stride_ == 0;
    if (!rec.is_final) ++trace_.iterations;
    if (keep) {
      trace_.records.push_back(rec);
      if (observer_ != nullptr) observer_->on_record(rec);
    }
  }

  GenerationTrace& trace() { return trace_; }

 private:
  int stride_;
  GenerationObserver* observer_;
  GenerationTrace trace_;
};

void emit_latent(GenerationObserver* observer, const torch::Tensor& z, int t, torch::Generator& gen) {
  if (observer != nullptr) observer->on_latent({z, t, gen.get_state()});
}

}  // namespace

void GuidanceConfig::validate(int T) const {
  std::ostringstream err;
  if (!(std::isfinite(w_g) && w_g >= 0.0)) err << "w_g must be finite and >= 0; ";
  if (k_late < 1) err << "k_late must be >= 1; ";
  if (k_early < k_late) err << "k_early must be >= k_late; ";
  if (t_prime < 0 || t_prime > T) err << "t_prime must lie in [0, " << T << "]; ";
  if (!(std::isfinite(clip_multiplier) && clip_multiplier > 0.0)) err << "clip_multiplier must be > 0; ";
  if (trace_every < 1) err << "trace_every must be >= 1; ";
  if (!err.str().empty()) throw ConfigError("invalid guidance config: " + err.str());
}

void to_json(nlohmann::json& j, const GuidanceConfig& cfg) {
  j = nlohmann::json{{"w_g", cfg.w_g},
                     {"k_early", cfg.k_early},
                     {"k_late", cfg.k_late},
                     {"t_prime", cfg.t_prime},
                     {"clip_multiplier", cfg.clip_multiplier},
                     {"seed", cfg.seed},
                     {"trace_every", cfg.trace_every}};
}

void from_json(const nlohmann::json& j, GuidanceConfig& cfg) {
  cfg.w_g = j.value("w_g", cfg.w_g);
  cfg.k_early = j.value("k_early", cfg.k_early);
  cfg.k_late = j.value("k_late", cfg.k_late);
  cfg.t_prime = j.value("t_prime", cfg.t_prime);
  cfg.clip_multiplier = j.value("clip_multiplier", cfg.clip_multiplier);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.trace_every = j.value("trace_every", cfg.trace_every);
}

void to_json(nlohmann::json& j, const StepRecord& r) {
  j = nlohmann::json{{"t", r.t},
                     {"k", r.k},
                     {"loss", r.loss},
                     {"grad_norm", r.grad_norm},
                     {"grad_std", r.grad_std},
                     {"grad_max_abs", r.grad_max_abs},
                     {"eps_norm", r.eps_norm},
                     {"normalized_norm", r.normalized_norm},
                     {"normalized_std", r.normalized_std},
                     {"clip_threshold", r.clip_threshold},
                     {"post_clip_max_abs", r.post_clip_max_abs},
                     {"clipped", r.clipped},
                     {"zero_gradient", r.zero_gradient},
                     {"degenerate_std", r.degenerate_std},
                     {"final", r.is_final}};
}

void from_json(const nlohmann::json& j, StepRecord& r) {
  j.at("t").get_to(r.t);
  j.at("k").get_to(r.k);
  j.at("loss").get_to(r.loss);
  r.grad_norm = j.value("grad_norm", 0.0);
  r.grad_std = j.value("grad_std", 0.0);
  r.grad_max_abs = j.value("grad_max_abs", 0.0);
  r.eps_norm = j.value("eps_norm", 0.0);
  r.normalized_norm = j.value("normalized_norm", 0.0);
  r.normalized_std = j.value("normalized_std", 0.0);
  r.clip_threshold = j.value("clip_threshold", 0.0);
  r.post_clip_max_abs = j.value("post_clip_max_abs", 0.0);
  r.clipped = j.value("clipped", std::int64_t{0});
  r.zero_gradient = j.value("zero_gradient", false);
  r.degenerate_std = j.value("degenerate_std", false);
  r.is_final = j.value("final", false);
}

double feature_loss(const FeatureVector& f_x, const FeatureVector& f_s) {
  f_x.require_comparable(f_s);
  double sum = 0.0;
  for (std::size_t i = 0; i < f_x.dim(); ++i) {
    const double d = f_x.values()[i] - f_s.values()[i];
    sum += d * d;
  }
  return sum;
}

torch::Tensor feature_loss(const torch::Tensor& f_x, const torch::Tensor& f_s) {
  if (f_x.sizes() != f_s.sizes()) throw std::invalid_argument("feature_loss: shape mismatch");
  const auto diff = f_x - f_s;
  return (diff * diff).sum();
}

NormalizedGradient normalize_gradient(const torch::Tensor& grad, const torch::Tensor& eps_hat) {
  if (grad.sizes() != eps_hat.sizes()) throw std::invalid_argument("normalize_gradient: shape mismatch");
  const auto g = grad.detach().to(torch::kFloat64);
  const double g_norm = g.norm().item<double>();
  if (g_norm == 0.0) {
    return {torch::zeros_like(grad), true};
  }
  const double scale = l2(eps_hat.detach()) / g_norm;
  return {(g * scale).to(grad.scalar_type()), false};
}

ClippedGradient clip_gradient(const torch::Tensor& grad, double clip_multiplier) {
  const auto g = grad.detach().to(torch::kFloat64);
  if (!all_finite(g)) throw std::invalid_argument("clip_gradient: non-finite gradient");
  ClippedGradient out;
  const double std = population_std(g);
  out.threshold = clip_multiplier * std;
  if (std == 0.0) {
    out.value = torch::zeros_like(grad);
    out.clipped = g.ne(0.0).sum().item<std::int64_t>();
    out.degenerate_std = true;
    return out;
  }
  out.clipped = g.abs().gt(out.threshold).sum().item<std::int64_t>();
  out.value = g.clamp(-out.threshold, out.threshold).to(grad.scalar_type());
  return out;
}

torch::Tensor modify_noise(const torch::Tensor& eps_hat, const torch::Tensor& grad_fixed, double w_g) {
  if (eps_hat.sizes() != grad_fixed.sizes()) throw std::invalid_argument("modify_noise: shape mismatch");
  return eps_hat - w_g * grad_fixed.to(eps_hat.scalar_type());
}

torch::Tensor sample_prev(const torch::Tensor& z_t, int t, const torch::Tensor& eps_prime,
                          const VarianceSchedule& sched, torch::Generator& gen) {
  sched.check_timestep(t);
  if (z_t.sizes() != eps_prime.sizes()) throw std::invalid_argument("sample_prev: shape mismatch");
  const double alpha = sched.alpha(t);
  const double coef = (1.0 - alpha) / std::sqrt(1.0 - sched.alpha_bar(t));
  auto mean = (z_t - coef * eps_prime) / std::sqrt(alpha);
  if (t == 1) {
    return mean;
  }
  const auto delta = torch::randn(z_t.sizes(), gen, z_t.options());
  return mean + std::sqrt(sched.beta(t)) * delta;
}

torch::Tensor self_recur(const torch::Tensor& z_prev, int t, const VarianceSchedule& sched, torch::Generator& gen) {
  sched.check_timestep(t);
  const double alpha = sched.alpha(t);
  const auto delta = torch::randn(z_prev.sizes(), gen, z_prev.options());
  return std::sqrt(alpha) * z_prev + std::sqrt(1.0 - alpha) * delta;
}

int recurrence_schedule(int t, const GuidanceConfig& cfg, int T) {
  if (t < 1 || t > T) throw std::out_of_range("recurrence_schedule: timestep outside [1, T]");
  return t > T - cfg.t_prime ? cfg.k_early : cfg.k_late;
}

GenerationTrace generate(const FeatureVector& target, const DiffusionBackbone& backbone,
                         const FeatureExtractor& extractor, const GuidanceConfig& cfg,
                         GenerationObserver* observer) {
  check_compatible(target, backbone, extractor);
  const auto& sched = backbone.schedule();
  const int T = sched.steps();
  cfg.validate(T);

  auto gen = make_generator(cfg.seed);
  const auto f_s = target.to_tensor(torch::kFloat32);
  TraceBuilder builder(cfg.trace_every, observer);

  auto abort = [&](const std::string& what, StepIndex at) {
    std::ostringstream msg;
    msg << what << " at t=" << at.t << " k=" << at.k;
    throw GenerationAborted(msg.str(), builder.trace(), at);
  };

  auto z = torch::randn(backbone.latent_shape().sizes(), gen, torch::kFloat32);
  emit_latent(observer, z, T, gen);

  for (int t = T; t >= 1; --t) {
    const int K = recurrence_schedule(t, cfg, T);
    for (int k = 1; k <= K; ++k) {
      const auto z_in = z.detach().requires_grad_(true);
      const auto eps_hat = backbone.predict_noise(z_in, t);
      const auto z0_hat = predict_clean(z_in, t, eps_hat, sched);
      const auto image = virtual_save(backbone.decode(z0_hat));
      const auto loss = feature_loss(extractor.features(image.values), f_s);

      StepRecord rec;
      rec.t = t;
      rec.k = k;
      rec.loss = loss.item<double>();
      if (!std::isfinite(rec.loss)) abort("non-finite loss", {t, k});

      // Guidance follows the gradient of -loss: with modify_noise subtracting
      // it and sample_prev subtracting eps', each step then descends the loss.
      const auto grad = torch::autograd::grad({-loss}, {z_in})[0].to(torch::kFloat64);
      if (!all_finite(grad)) abort("non-finite gradient", {t, k});
      const auto eps = eps_hat.detach();

      rec.grad_norm = grad.norm().item<double>();
      rec.grad_std = population_std(grad);
      rec.grad_max_abs = max_abs(grad);
      rec.eps_norm = l2(eps);

      const auto normalized = normalize_gradient(grad, eps);
      rec.zero_gradient = normalized.zero_gradient;
      rec.normalized_norm = normalized.value.norm().item<double>();
      rec.normalized_std = population_std(normalized.value);

      auto fixed = normalized.value;
      if (!normalized.zero_gradient) {
        const auto clipped = clip_gradient(normalized.value, cfg.clip_multiplier);
        fixed = clipped.value;
        rec.clip_threshold = clipped.threshold;
        rec.clipped = clipped.clipped;
        rec.degenerate_std = clipped.degenerate_std;
      }
      rec.post_clip_max_abs = max_abs(fixed);

      const auto eps_prime = rec.flagged() ? eps : modify_noise(eps, fixed, cfg.w_g);
      const auto z_prev = sample_prev(z, t, eps_prime, sched, gen);
      if (!all_finite(z_prev)) abort("non-finite latent", {t, k});
      builder.add(rec, image);

      if (k < K) {
        z = self_recur(z_prev, t, sched, gen);
        emit_latent(observer, z, t, gen);
      } else {
        z = z_prev;
        emit_latent(observer, z, t - 1, gen);
      }
    }
  }

  torch::NoGradGuard no_grad;
  auto final_image = virtual_save(backbone.decode(z));
  StepRecord rec;
  rec.is_final = true;
  rec.loss = feature_loss(extractor.features(final_image.values), f_s).item<double>();
  if (!std::isfinite(rec.loss)) abort("non-finite loss on the final image", {0, 0});
  builder.add(rec, final_image);

  auto trace = std::move(builder.trace());
  trace.final_image = final_image.detached();
  trace.final_distance = rec.loss;
  return trace;
}

torch::Tensor ancestral_sample(const DiffusionBackbone& backbone, const GuidanceConfig& cfg,
                               GenerationObserver* observer) {
  const auto& sched = backbone.schedule();
  const int T = sched.steps();
  cfg.validate(T);
  torch::NoGradGuard no_grad;
  auto gen = make_generator(cfg.seed);
  auto z = torch::randn(backbone.latent_shape().sizes(), gen, torch::kFloat32);
  emit_latent(observer, z, T, gen);
  for (int t = T; t >= 1; --t) {
    const int K = recurrence_schedule(t, cfg, T);
    for (int k = 1; k <= K; ++k) {
      const auto z_prev = sample_prev(z, t, backbone.predict_noise(z, t), sched, gen);
      if (k < K) {
        z = self_recur(z_prev, t, sched, gen);
        emit_latent(observer, z, t, gen);
      } else {
        z = z_prev;
        emit_latent(observer, z, t - 1, gen);
      }
    }
  }
  return z;
}

}  // namespace featinv
