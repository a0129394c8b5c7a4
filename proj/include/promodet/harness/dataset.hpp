#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promodet/geometry.hpp"
#include "promodet/harness/image.hpp"
#include "promodet/model.hpp"

namespace promodet::harness {

struct Sample {
  Image image;
  std::vector<GroundTruth> gts;
  std::int64_t image_id = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;  // index 0 is background
  std::map<int, int> category_of_label;  // model label -> dataset category id

  int num_classes() const { return static_cast<int>(class_names.size()) - 1; }
  std::size_t size() const { return samples.size(); }
};

// Independent stream per (seed, index), so generation order never matters.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t index, std::uint64_t salt = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

enum class ShapeKind { kCircle = 1, kSquare = 2, kTriangle = 3 };

struct SynthOptions {
  int image_size = 256;
  int min_objects = 1;
  int max_objects = 5;
  double min_side = 0.08;  // fraction of the image side
  double max_side = 0.6;
  double max_overlap = 0.3;
};

namespace detail {

inline bool inside_shape(ShapeKind k, const Box& b, double x, double y) {
  switch (k) {
    case ShapeKind::kSquare:
      return x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
    case ShapeKind::kCircle: {
      const double r = 0.5 * b.width();
      const double dx = x - b.cx(), dy = y - b.cy();
      return dx * dx + dy * dy < r * r;
    }
    case ShapeKind::kTriangle: {
      // Apex at top center, base along the bottom edge.
      if (y < b.y1 || y >= b.y2) return false;
      const double t = (y - b.y1) / b.height();
      const double half = 0.5 * b.width() * t;
      return std::abs(x - b.cx()) < half;
    }
  }
  return false;
}

// Smooth texture: a few random plane waves plus per-pixel noise.
inline void paint_background(Image& img, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> noise(0, 0.04);
  std::array<double, 3> base{};
  for (auto& b : base) b = 0.25 + 0.5 * u(rng);
  struct Wave {
    double fx, fy, phase, amp;
    int channel;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 4; ++k) {
    waves.push_back({(u(rng) - 0.5) * 0.15, (u(rng) - 0.5) * 0.15, u(rng) * 6.283, 0.05 + 0.1 * u(rng),
                     static_cast<int>(u(rng) * 3) % 3});
  }
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        double v = base[c];
        for (const auto& w : waves) {
          if (w.channel == c) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
        }
        img.at(c, y, x) = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
      }
    }
  }
}

}  // namespace detail

// Deterministic synthetic shapes: 1..5 objects (circle, square, triangle ->
// labels 1, 2, 3) on textured backgrounds, object sides spanning small to
// large relative to the image.
inline Dataset synth_dataset(int n_images, std::uint64_t seed, const SynthOptions& opt = {}) {
  if (n_images < 1) throw ConfigError("synth: n_images must be >= 1");
  Dataset ds;
  ds.class_names = {"background", "circle", "square", "triangle"};
  for (int c = 1; c <= 3; ++c) ds.category_of_label[c] = c;
  const int s = opt.image_size;
  for (int i = 0; i < n_images; ++i) {
    auto rng = stream(seed, static_cast<std::uint64_t>(i));
    std::uniform_real_distribution<double> u(0, 1);
    Sample smp;
    smp.image_id = i + 1;
    smp.image = Image(s, s);
    detail::paint_background(smp.image, rng);
    const int n_obj = opt.min_objects +
                      static_cast<int>(u(rng) * (opt.max_objects - opt.min_objects + 1));
    for (int k = 0; k < n_obj; ++k) {
      // Log-uniform side so small, medium and large all show up.
      const double side = s * opt.min_side * std::pow(opt.max_side / opt.min_side, u(rng));
      const double w = std::max(4.0, std::round(side));
      const ShapeKind kind = static_cast<ShapeKind>(1 + static_cast<int>(u(rng) * 3) % 3);
      Box b;
      bool placed = false;
      for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
        const double x1 = std::floor(u(rng) * (s - w));
        const double y1 = std::floor(u(rng) * (s - w));
        b = {x1, y1, x1 + w, y1 + w};
        placed = true;
        for (const auto& g : smp.gts) placed = placed && iou(g.box, b) <= opt.max_overlap;
      }
      if (!placed) continue;
      std::array<float, 3> color;
      // Saturated color, pushed away from mid-gray so shapes stay visible.
      for (auto& c : color) c = static_cast<float>(u(rng) < 0.5 ? 0.05 + 0.2 * u(rng) : 0.75 + 0.2 * u(rng));
      for (int y = static_cast<int>(b.y1); y < static_cast<int>(b.y2); ++y) {
        for (int x = static_cast<int>(b.x1); x < static_cast<int>(b.x2); ++x) {
          if (!detail::inside_shape(kind, b, x + 0.5, y + 0.5)) continue;
          for (int c = 0; c < 3; ++c) smp.image.at(c, y, x) = color[c];
        }
      }
      smp.gts.push_back({b, static_cast<int>(kind)});
    }
    ds.samples.push_back(std::move(smp));
  }
  return ds;
}

// COCO instances file. Images are resized to `image_size` squares and the
// boxes scaled along; crowd annotations are skipped.
inline Dataset load_coco(const std::string& annotation_path, int image_size,
                         const std::string& image_dir = "", int limit = 0) {
  std::ifstream in(annotation_path);
  if (!in) throw IoError(annotation_path + ": cannot open");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(annotation_path + ": " + e.what());
  }
  const std::filesystem::path root =
      image_dir.empty() ? std::filesystem::path(annotation_path).parent_path()
                        : std::filesystem::path(image_dir);
  Dataset ds;
  ds.class_names = {"background"};
  std::map<int, int> label_of_category;
  std::vector<std::pair<int, std::string>> cats;
  for (const auto& c : j.at("categories")) cats.emplace_back(c.at("id").get<int>(), c.at("name"));
  std::sort(cats.begin(), cats.end());
  for (const auto& [id, name] : cats) {
    const int label = static_cast<int>(ds.class_names.size());
    label_of_category[id] = label;
    ds.category_of_label[label] = id;
    ds.class_names.push_back(name);
  }
  std::map<std::int64_t, std::vector<nlohmann::json>> anns;
  for (const auto& a : j.at("annotations")) anns[a.at("image_id").get<std::int64_t>()].push_back(a);
  for (const auto& im : j.at("images")) {
    if (limit > 0 && static_cast<int>(ds.samples.size()) >= limit) break;
    Sample smp;
    smp.image_id = im.at("id").get<std::int64_t>();
    const Image raw = read_image((root / im.at("file_name").get<std::string>()).string());
    const double sx = static_cast<double>(image_size) / raw.width;
    const double sy = static_cast<double>(image_size) / raw.height;
    smp.image = resize(raw, image_size, image_size);
    for (const auto& a : anns[smp.image_id]) {
      if (a.value("iscrowd", 0) != 0) continue;
      const auto bb = a.at("bbox");
      Box b{bb[0].get<double>() * sx, bb[1].get<double>() * sy,
            (bb[0].get<double>() + bb[2].get<double>()) * sx,
            (bb[1].get<double>() + bb[3].get<double>()) * sy};
      b = b.clipped(image_size, image_size);
      if (!b.valid()) continue;
      const int cat = a.at("category_id").get<int>();
      if (!label_of_category.count(cat)) {
        throw IoError(annotation_path + ": annotation with unknown category " + std::to_string(cat));
      }
      smp.gts.push_back({b, label_of_category[cat]});
    }
    ds.samples.push_back(std::move(smp));
  }
  return ds;
}

// "synth:N:SEED" or a COCO annotation file path.
inline Dataset load_dataset(const std::string& spec, int image_size) {
  if (spec.rfind("synth:", 0) == 0) {
    const auto a = spec.find(':', 6);
    if (a == std::string::npos) throw ConfigError("dataset '" + spec + "': expected synth:N:SEED");
    try {
      const int n = std::stoi(spec.substr(6, a - 6));
      const auto seed = std::stoull(spec.substr(a + 1));
      SynthOptions o;
      o.image_size = image_size;
      return synth_dataset(n, seed, o);
    } catch (const std::logic_error&) {
      throw ConfigError("dataset '" + spec + "': expected synth:N:SEED");
    }
  }
  return load_coco(spec, image_size);
}

}  // namespace promodet::harness
