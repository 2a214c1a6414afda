#include "featinv/dataset.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "featinv/errors.hpp"
#include "featinv/image_io.hpp"

namespace featinv {

namespace {

using Color = std::array<double, 3>;

enum class Kind { kCircle = 0, kSquare, kTriangle, kCross };

struct Primitive {
  Kind kind;
  double cx, cy, radius, angle;
};

bool covers(const Primitive& p, double x, double y) {
  const double dx = x - p.cx;
  const double dy = y - p.cy;
  const double c = std::cos(p.angle);
  const double s = std::sin(p.angle);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  const double r = p.radius;
  switch (p.kind) {
    case Kind::kCircle:
      return u * u + v * v <= r * r;
    case Kind::kSquare:
      return std::abs(u) <= 0.8 * r && std::abs(v) <= 0.8 * r;
    case Kind::kTriangle: {
      // Equilateral triangle inscribed in radius r: three half-planes.
      for (int k = 0; k < 3; ++k) {
        const double theta = std::numbers::pi / 2.0 + k * 2.0 * std::numbers::pi / 3.0 + std::numbers::pi / 3.0;
        if (u * std::cos(theta) + v * std::sin(theta) > 0.5 * r) return false;
      }
      return true;
    }
    case Kind::kCross: {
      const double arm = 0.32 * r;
      return (std::abs(u) <= r && std::abs(v) <= arm) || (std::abs(v) <= r && std::abs(u) <= arm);
    }
  }
  return false;
}

double color_distance(const Color& a, const Color& b) {
  double d = 0.0;
  for (int i = 0; i < 3; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

double luminance(const Color& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace

const std::vector<std::string>& shape_class_names() {
  static const std::vector<std::string> names{"circle", "square", "triangle", "cross"};
  return names;
}

LabeledImages LabeledImages::select_class(std::int64_t label) const {
  std::vector<std::int64_t> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) rows.push_back(static_cast<std::int64_t>(i));
  }
  LabeledImages out;
  out.images = images.index_select(0, torch::tensor(rows, torch::kInt64));
  out.labels.assign(rows.size(), label);
  out.class_names = class_names;
  return out;
}

LabeledImages LabeledImages::slice(std::int64_t begin, std::int64_t end) const {
  LabeledImages out;
  out.images = images.slice(0, begin, end);
  out.labels.assign(labels.begin() + begin, labels.begin() + end);
  out.class_names = class_names;
  return out;
}

LabeledImages generate_shapes(std::int64_t count, const ShapesConfig& cfg) {
  if (count <= 0) throw std::invalid_argument("dataset size must be positive");
  if (cfg.channels != 1 && cfg.channels != 3) throw std::invalid_argument("shapes dataset supports 1 or 3 channels");
  if (cfg.size < 8) throw std::invalid_argument("shapes dataset needs images of at least 8x8");

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto n_classes = static_cast<std::int64_t>(shape_class_names().size());
  const std::int64_t size = cfg.size;
  constexpr int kSuper = 4;

  auto images = torch::empty({count, cfg.channels, size, size}, torch::kFloat32);
  auto acc = images.accessor<float, 4>();
  std::vector<std::int64_t> labels(static_cast<std::size_t>(count));

  for (std::int64_t n = 0; n < count; ++n) {
    const std::int64_t label = n % n_classes;
    labels[static_cast<std::size_t>(n)] = label;

    Color bg_a{unit(rng), unit(rng), unit(rng)};
    Color bg_b = bg_a;
    for (double& c : bg_b) c = std::clamp(c + 0.4 * (unit(rng) - 0.5), 0.0, 1.0);
    const double grad_angle = 2.0 * std::numbers::pi * unit(rng);
    Color fg;
    do {
      fg = {unit(rng), unit(rng), unit(rng)};
    } while (color_distance(fg, bg_a) < 0.5 || std::abs(luminance(fg) - luminance(bg_a)) < 0.15);

    Primitive prim{static_cast<Kind>(label), (0.35 + 0.3 * unit(rng)) * size, (0.35 + 0.3 * unit(rng)) * size,
                   (0.2 + 0.12 * unit(rng)) * size, 2.0 * std::numbers::pi * unit(rng)};

    for (std::int64_t y = 0; y < size; ++y) {
      for (std::int64_t x = 0; x < size; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            if (covers(prim, x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper)) ++hits;
          }
        }
        const double coverage = static_cast<double>(hits) / (kSuper * kSuper);
        const double g = 0.5 + 0.5 * ((x / double(size) - 0.5) * std::cos(grad_angle) +
                                      (y / double(size) - 0.5) * std::sin(grad_angle));
        Color px;
        for (int c = 0; c < 3; ++c) {
          const double bg = (1.0 - g) * bg_a[c] + g * bg_b[c];
          px[c] = coverage * fg[c] + (1.0 - coverage) * bg;
        }
        auto store = [&](std::int64_t ch, double v01) {
          const double byte = std::floor(std::clamp(v01, 0.0, 1.0) * 255.0 + 0.5);
          acc[n][ch][y][x] = static_cast<float>(byte / 127.5 - 1.0);
        };
        if (cfg.channels == 3) {
          for (int c = 0; c < 3; ++c) store(c, px[c]);
        } else {
          store(0, luminance(px));
        }
      }
    }
  }
  return {images, std::move(labels), shape_class_names()};
}

void write_dataset(const std::filesystem::path& dir, const LabeledImages& data, const ShapesConfig& cfg) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "featinv-shapes-v1";
  manifest["classes"] = data.class_names;
  manifest["shape"] = {data.images.size(1), data.images.size(2), data.images.size(3)};
  manifest["seed"] = cfg.seed;
  auto& items = manifest["items"] = nlohmann::json::array();
  const auto bytes = torch::round((data.images + 1.0) * 127.5).clamp(0, 255).to(torch::kUInt8);
  for (std::int64_t i = 0; i < data.size(); ++i) {
    std::ostringstream name;
    name << "img_" << std::setw(5) << std::setfill('0') << i << ".png";
    write_png(dir / name.str(), bytes[i]);
    items.push_back({{"file", name.str()}, {"label", data.labels[static_cast<std::size_t>(i)]}});
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw RunError("failed writing dataset manifest in " + dir.string());
}

LabeledImages load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("no dataset manifest at " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed dataset manifest: " + std::string(e.what()));
  }
  const auto& items = manifest.at("items");
  if (items.empty()) throw ConfigError("dataset at " + dir.string() + " is empty");
  std::vector<torch::Tensor> images;
  std::vector<std::int64_t> labels;
  for (const auto& item : items) {
    images.push_back((read_png(dir / item.at("file").get<std::string>()).to(torch::kFloat64) / 127.5 - 1.0).to(torch::kFloat32));
    labels.push_back(item.value("label", std::int64_t{0}));
  }
  LabeledImages out;
  out.images = torch::stack(images);
  out.labels = std::move(labels);
  out.class_names = manifest.value("classes", std::vector<std::string>{});
  return out;
}

}  // namespace featinv
