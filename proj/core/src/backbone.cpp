#include "featinv/backbone.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "featinv/errors.hpp"
#include "featinv/random.hpp"

namespace featinv {

namespace {

constexpr const char* kBackboneFormat = "featinv-toy-backbone-v1";
// Below this, dividing by sqrt(abar) amplifies float noise past usefulness.
constexpr double kMinSqrtAlphaBar = 1e-12;

UNet build_net(const UNetConfig& cfg, std::uint64_t seed) {
  auto lock = lock_global_rng(seed);
  UNet net(cfg);
  return net;
}

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard no_grad;
  auto d = dst.parameters();
  auto s = src.parameters();
  for (std::size_t i = 0; i < d.size(); ++i) d[i].copy_(s[i]);
}

}  // namespace

torch::Tensor predict_clean(const torch::Tensor& z_t, int t, const torch::Tensor& eps_hat,
                            const VarianceSchedule& sched) {
  if (z_t.sizes() != eps_hat.sizes()) {
    throw std::invalid_argument("predict_clean: noise shape does not match latent shape");
  }
  const double ab = sched.alpha_bar(t);
  const double sqrt_ab = std::sqrt(ab);
  if (!(sqrt_ab > kMinSqrtAlphaBar) || !std::isfinite(sqrt_ab)) {
    std::ostringstream msg;
    msg << "predict_clean: sqrt(alpha_bar_" << t << ") = " << sqrt_ab << " underflows";
    throw std::domain_error(msg.str());
  }
  auto out = (z_t - std::sqrt(1.0 - ab) * eps_hat) / sqrt_ab;
  if (!torch::isfinite(out.detach()).all().item<bool>()) {
    throw std::domain_error("predict_clean: non-finite clean-latent estimate at t=" + std::to_string(t));
  }
  return out;
}

ToyBackbone::ToyBackbone(UNet net, VarianceSchedule schedule, ImageShape shape)
    : net_(std::move(net)), schedule_(std::move(schedule)), shape_(shape) {
  if (net_->config().image_channels != shape_.channels) {
    throw std::invalid_argument("toy backbone: network channels do not match image shape");
  }
  const auto factor = std::int64_t{1} << (net_->config().channel_mults.size() - 1);
  if (shape_.height % factor != 0 || shape_.width % factor != 0) {
    throw std::invalid_argument("toy backbone: image size must be divisible by " + std::to_string(factor));
  }
  net_->eval();
  // Inference only: gradients flow to the latent, never to the weights.
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
}

torch::Tensor ToyBackbone::predict_noise(const torch::Tensor& z_t, int t, const Conditioning& cond) const {
  if (cond.has_value()) {
    throw std::invalid_argument("toy backbone is unconditional; conditioning must be empty");
  }
  require_shape(z_t, shape_, "predict_noise");
  schedule_.check_timestep(t);
  const auto ts = torch::full({1}, t, torch::kInt64);
  return net_->forward(z_t.unsqueeze(0), ts).squeeze(0);
}

torch::Tensor ToyBackbone::predict_noise_batch(const torch::Tensor& z_t, const torch::Tensor& t) const {
  return net_->forward(z_t, t);
}

torch::Tensor ToyBackbone::decode(const torch::Tensor& z0_hat) const {
  require_shape(z0_hat, shape_, "decode");
  return z0_hat;
}

std::string ToyBackbone::describe() const {
  std::ostringstream out;
  out << "toy pixel-space UNet (" << parameter_count(*net_) << " params, " << shape_.str() << ", T="
      << schedule_.steps() << ")";
  return out.str();
}

std::shared_ptr<ToyBackbone> make_toy_backbone(const UNetConfig& cfg, VarianceSchedule sched, ImageShape shape,
                                               std::uint64_t seed) {
  return std::make_shared<ToyBackbone>(build_net(cfg, seed), std::move(sched), shape);
}

TrainedBackbone train_toy_backbone(const LabeledImages& dataset, const VarianceSchedule& sched,
                                   const BackboneTrainConfig& cfg) {
  if (dataset.size() == 0) throw std::invalid_argument("train_toy_backbone: empty dataset");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("train_toy_backbone: bad epoch/batch count");
  const ImageShape shape = dataset.shape();
  UNetConfig ucfg = cfg.unet;
  ucfg.image_channels = shape.channels;

  UNet net = build_net(ucfg, cfg.seed);
  UNet ema = build_net(ucfg, cfg.seed);
  copy_parameters(*ema, *net);
  net->train();

  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  auto gen = make_generator(derive_seed(cfg.seed, 1));

  const int T = sched.steps();
  std::vector<double> sa(T), sb(T);
  for (int t = 1; t <= T; ++t) {
    sa[t - 1] = std::sqrt(sched.alpha_bar(t));
    sb[t - 1] = std::sqrt(1.0 - sched.alpha_bar(t));
  }
  const auto sqrt_ab = torch::tensor(sa, torch::kFloat64).to(torch::kFloat32);
  const auto sqrt_1mab = torch::tensor(sb, torch::kFloat64).to(torch::kFloat32);

  const std::int64_t n = dataset.size();
  const std::int64_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = per_epoch * cfg.epochs;
  const auto images = dataset.images.to(torch::kFloat32);

  TrainedBackbone result;
  std::int64_t step = 0;
  auto ema_params = ema->parameters();
  auto params = net->parameters();
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = torch::randperm(n, gen, torch::kInt64);
    double loss_sum = 0.0;
    for (std::int64_t b = 0; b < per_epoch; ++b) {
      const auto idx = perm.slice(0, b * cfg.batch_size, std::min(n, (b + 1) * cfg.batch_size));
      const auto x0 = images.index_select(0, idx);
      const auto bs = x0.size(0);
      const auto t = torch::randint(1, T + 1, {bs}, gen, torch::kInt64);
      const auto eps = torch::randn(x0.sizes(), gen, torch::kFloat32);
      const auto z_t = sqrt_ab.index_select(0, t - 1).view({-1, 1, 1, 1}) * x0 +
                       sqrt_1mab.index_select(0, t - 1).view({-1, 1, 1, 1}) * eps;

      // Cosine decay to a tenth of the base rate.
      const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
      const double lr = cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
      for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

      const auto loss = torch::mse_loss(net->forward(z_t, t), eps);
      const double loss_value = loss.item<double>();
      if (!std::isfinite(loss_value)) {
        std::ostringstream msg;
        msg << "backbone training diverged: loss=" << loss_value << " at epoch " << epoch << " step " << step
            << " (lr=" << lr << ")";
        throw RunError(msg.str());
      }
      opt.zero_grad();
      loss.backward();
      torch::nn::utils::clip_grad_norm_(params, 1.0);
      opt.step();
      {
        torch::NoGradGuard no_grad;
        for (std::size_t i = 0; i < params.size(); ++i) {
          ema_params[i].mul_(cfg.ema_decay).add_(params[i].detach(), 1.0 - cfg.ema_decay);
        }
      }
      loss_sum += loss_value;
      ++step;
    }
    result.report.epoch_losses.push_back(loss_sum / static_cast<double>(per_epoch));
    if (cfg.on_epoch) cfg.on_epoch(epoch, result.report.epoch_losses.back());
  }
  result.report.steps = step;
  result.backbone = std::make_shared<ToyBackbone>(ema, sched, shape);
  return result;
}

void save_backbone(const std::filesystem::path& path, const ToyBackbone& backbone) {
  nlohmann::json meta;
  meta["format"] = kBackboneFormat;
  meta["unet"] = backbone.network()->config();
  const auto shape = backbone.image_shape();
  meta["shape"] = {shape.channels, shape.height, shape.width};
  meta["schedule"]["betas"] = backbone.schedule().betas();

  torch::serialize::OutputArchive archive;
  archive.write("format", c10::IValue(std::string(kBackboneFormat)));
  archive.write("meta", c10::IValue(meta.dump()));
  torch::serialize::OutputArchive weights;
  backbone.network()->save(weights);
  archive.write("model", weights);
  try {
    archive.save_to(path.string());
  } catch (const c10::Error& e) {
    throw RunError("cannot write backbone checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

std::shared_ptr<ToyBackbone> load_backbone(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("backbone checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw ConfigError("cannot read backbone checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  c10::IValue format, meta_value;
  if (!archive.try_read("format", format) || !format.isString() || format.toStringRef() != kBackboneFormat) {
    throw ConfigError(path.string() + " is not a toy backbone checkpoint");
  }
  archive.read("meta", meta_value);
  const auto meta = nlohmann::json::parse(meta_value.toStringRef());
  const auto cfg = meta.at("unet").get<UNetConfig>();
  const auto dims = meta.at("shape").get<std::vector<std::int64_t>>();
  VarianceSchedule sched(meta.at("schedule").at("betas").get<std::vector<double>>());

  UNet net(cfg);
  torch::serialize::InputArchive weights;
  archive.read("model", weights);
  net->load(weights);
  return std::make_shared<ToyBackbone>(net, std::move(sched), ImageShape{dims.at(0), dims.at(1), dims.at(2)});
}

}  // namespace featinv
