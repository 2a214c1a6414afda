#include "featinv/extractor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "featinv/digest.hpp"
#include "featinv/errors.hpp"
#include "featinv/random.hpp"

namespace featinv {

namespace nn = torch::nn;

namespace {

constexpr const char* kExtractorFormat = "featinv-toy-cnn-v1";

std::string weights_id(ShapeClassifier& net) {
  std::ostringstream bytes;
  torch::serialize::OutputArchive archive;
  net->save(archive);
  archive.save_to(bytes);
  return "toycnn-" + sha256_hex(bytes.str()).substr(0, 16);
}

}  // namespace

torch::Tensor FeatureExtractor::features(const torch::Tensor& image) const {
  return features_batch(image.unsqueeze(0)).squeeze(0);
}

FeatureVector FeatureExtractor::extract(const QuantizedImage& image) const {
  require_shape(image.values, input_shape(), "extract");
  torch::NoGradGuard no_grad;
  const auto v = image.values.detach();
  if (v.min().item<double>() < 0.0 || v.max().item<double>() > 255.0) {
    throw std::invalid_argument("extract: pixel values outside [0, 255]");
  }
  return FeatureVector::from_tensor(features(v.to(torch::kFloat32)), id());
}

AnalyticExtractor::AnalyticExtractor(ImageShape input, std::int64_t grid) : input_(input), grid_(grid) {
  if (grid < 1 || input.height % grid != 0 || input.width % grid != 0) {
    throw std::invalid_argument("analytic extractor: image size must be divisible by the grid");
  }
  std::ostringstream id;
  id << "analytic-meanpool-" << grid << "x" << grid;
  id_ = id.str();
}

torch::Tensor AnalyticExtractor::features_batch(const torch::Tensor& images) const {
  const auto n = images.size(0);
  const auto c = input_.channels;
  const auto cells = images.reshape({n, c, grid_, input_.height / grid_, grid_, input_.width / grid_});
  return cells.mean({3, 5}).reshape({n, c * grid_ * grid_});
}

void to_json(nlohmann::json& j, const CnnConfig& cfg) {
  j = nlohmann::json{{"image_channels", cfg.image_channels},
                     {"image_size", cfg.image_size},
                     {"base_channels", cfg.base_channels},
                     {"num_classes", cfg.num_classes}};
}

void from_json(const nlohmann::json& j, CnnConfig& cfg) {
  cfg.image_channels = j.value("image_channels", cfg.image_channels);
  cfg.image_size = j.value("image_size", cfg.image_size);
  cfg.base_channels = j.value("base_channels", cfg.base_channels);
  cfg.num_classes = j.value("num_classes", cfg.num_classes);
}

ShapeClassifierImpl::ShapeClassifierImpl(const CnnConfig& cfg) : cfg_(cfg) {
  const auto b = cfg.base_channels;
  // GroupNorm keeps the plain conv stack trainable from scratch.
  auto stage = [](nn::Sequential& seq, std::int64_t in, std::int64_t out, std::int64_t stride) {
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1)));
    seq->push_back(nn::GroupNorm(nn::GroupNormOptions(std::min<std::int64_t>(8, out), out)));
    seq->push_back(nn::SiLU());
  };
  nn::Sequential trunk;
  stage(trunk, cfg.image_channels, b, 1);
  stage(trunk, b, 2 * b, 2);
  stage(trunk, 2 * b, 2 * b, 1);
  stage(trunk, 2 * b, 4 * b, 2);
  stage(trunk, 4 * b, 4 * b, 2);
  trunk_ = register_module("trunk", trunk);
  head_ = register_module("head", nn::Linear(4 * b, cfg.num_classes));
}

torch::Tensor ShapeClassifierImpl::embed(const torch::Tensor& images) {
  const auto x = images / 127.5 - 1.0;
  return trunk_->forward(x).mean({2, 3});
}

torch::Tensor ShapeClassifierImpl::classify(const torch::Tensor& embedding) { return head_(embedding); }

CnnExtractor::CnnExtractor(ShapeClassifier net, std::string id) : net_(std::move(net)), id_(std::move(id)) {
  net_->eval();
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
}

ImageShape CnnExtractor::input_shape() const {
  const auto& c = net_->config();
  return {c.image_channels, c.image_size, c.image_size};
}

torch::Tensor CnnExtractor::features_batch(const torch::Tensor& images) const { return net_->embed(images); }

torch::Tensor CnnExtractor::predict(const torch::Tensor& images) const {
  torch::NoGradGuard no_grad;
  return net_->classify(net_->embed(images)).argmax(1);
}

torch::Tensor to_pixels(const torch::Tensor& images) {
  return torch::round((images.clamp(-1.0, 1.0) + 1.0) * 127.5);
}

TrainedExtractor train_toy_extractor(const LabeledImages& train, const ExtractorTrainConfig& cfg) {
  if (train.size() == 0) throw std::invalid_argument("train_toy_extractor: empty dataset");
  CnnConfig ccfg = cfg.cnn;
  const auto shape = train.shape();
  if (shape.height != shape.width) throw std::invalid_argument("train_toy_extractor: square images required");
  ccfg.image_channels = shape.channels;
  ccfg.image_size = shape.height;
  ccfg.num_classes = std::max<std::int64_t>(ccfg.num_classes, static_cast<std::int64_t>(train.class_names.size()));

  ShapeClassifier net{nullptr};
  {
    auto lock = lock_global_rng(cfg.seed);
    net = ShapeClassifier(ccfg);
  }
  net->train();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  auto gen = make_generator(derive_seed(cfg.seed, 2));

  const auto pixels = to_pixels(train.images.to(torch::kFloat32));
  const auto labels = torch::tensor(train.labels, torch::kInt64);
  const auto n = train.size();
  const auto per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;

  TrainedExtractor out;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = torch::randperm(n, gen, torch::kInt64);
    double sum = 0.0;
    for (std::int64_t b = 0; b < per_epoch; ++b) {
      const auto idx = perm.slice(0, b * cfg.batch_size, std::min(n, (b + 1) * cfg.batch_size));
      const auto logits = net->classify(net->embed(pixels.index_select(0, idx)));
      const auto loss = torch::cross_entropy_loss(logits, labels.index_select(0, idx));
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw RunError("extractor training diverged at epoch " + std::to_string(epoch));
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
      sum += value;
    }
    out.epoch_losses.push_back(sum / static_cast<double>(per_epoch));
    if (cfg.on_epoch) cfg.on_epoch(epoch, out.epoch_losses.back());
  }
  net->eval();
  out.extractor = std::make_shared<CnnExtractor>(net, weights_id(net));
  out.train_accuracy = classification_accuracy(*out.extractor, train);
  return out;
}

double classification_accuracy(const CnnExtractor& extractor, const LabeledImages& data) {
  if (data.size() == 0) return 0.0;
  const auto pred = extractor.predict(to_pixels(data.images.to(torch::kFloat32)));
  const auto truth = torch::tensor(data.labels, torch::kInt64);
  return pred.eq(truth).to(torch::kFloat64).mean().item<double>();
}

void save_extractor(const std::filesystem::path& path, const CnnExtractor& extractor) {
  nlohmann::json meta;
  meta["format"] = kExtractorFormat;
  meta["cnn"] = extractor.network()->config();
  meta["id"] = extractor.id();
  torch::serialize::OutputArchive archive;
  archive.write("format", c10::IValue(std::string(kExtractorFormat)));
  archive.write("meta", c10::IValue(meta.dump()));
  torch::serialize::OutputArchive weights;
  extractor.network()->save(weights);
  archive.write("model", weights);
  try {
    archive.save_to(path.string());
  } catch (const c10::Error& e) {
    throw RunError("cannot write extractor checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

std::shared_ptr<CnnExtractor> load_extractor(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("extractor checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw ConfigError("cannot read extractor checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  c10::IValue format, meta_value;
  if (!archive.try_read("format", format) || !format.isString() || format.toStringRef() != kExtractorFormat) {
    throw ConfigError(path.string() + " is not a toy extractor checkpoint");
  }
  archive.read("meta", meta_value);
  const auto meta = nlohmann::json::parse(meta_value.toStringRef());
  ShapeClassifier net(meta.at("cnn").get<CnnConfig>());
  torch::serialize::InputArchive weights;
  archive.read("model", weights);
  net->load(weights);
  return std::make_shared<CnnExtractor>(net, meta.at("id").get<std::string>());
}

}  // namespace featinv
