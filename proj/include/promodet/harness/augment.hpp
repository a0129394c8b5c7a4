#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "promodet/harness/dataset.hpp"

namespace promodet::harness {

struct AugmentOptions {
  double flip_prob = 0.5;
  double expand_prob = 0.5;
  double max_expand = 4.0;
  bool crop = true;
  int crop_trials = 50;
  int crop_retries = 10;  // full resamplings before giving up on cropping
  std::array<float, 3> fill{0.5f, 0.5f, 0.5f};
};

inline Sample flip_horizontal(const Sample& s) {
  Sample out = s;
  const int w = s.image.width;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < s.image.height; ++y) {
      for (int x = 0; x < w; ++x) out.image.at(c, y, x) = s.image.at(c, y, w - 1 - x);
    }
  }
  for (auto& g : out.gts) g.box = {w - g.box.x2, g.box.y1, w - g.box.x1, g.box.y2};
  return out;
}

// Places the image on a canvas `ratio` times larger at (left, top).
inline Sample expand(const Sample& s, double ratio, int left, int top,
                     const std::array<float, 3>& fill) {
  const int w = static_cast<int>(s.image.width * ratio);
  const int h = static_cast<int>(s.image.height * ratio);
  if (left < 0 || top < 0 || left + s.image.width > w || top + s.image.height > h) {
    throw GeometryError("expand: placement outside the canvas");
  }
  Sample out;
  out.image_id = s.image_id;
  out.image = Image(w, h);
  for (int c = 0; c < 3; ++c) {
    std::fill_n(out.image.data.begin() + static_cast<std::ptrdiff_t>(c) * w * h,
                static_cast<std::ptrdiff_t>(w) * h, fill[c]);
    for (int y = 0; y < s.image.height; ++y) {
      for (int x = 0; x < s.image.width; ++x) out.image.at(c, y + top, x + left) = s.image.at(c, y, x);
    }
  }
  for (auto g : s.gts) {
    g.box = {g.box.x1 + left, g.box.y1 + top, g.box.x2 + left, g.box.y2 + top};
    out.gts.push_back(g);
  }
  return out;
}

// Crops to an integer patch; keeps boxes whose centers fall inside, clipped.
inline Sample crop_to(const Sample& s, const Box& patch) {
  const int x0 = static_cast<int>(patch.x1), y0 = static_cast<int>(patch.y1);
  const int w = static_cast<int>(patch.width()), h = static_cast<int>(patch.height());
  Sample out;
  out.image_id = s.image_id;
  out.image = Image(w, h);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.image.at(c, y, x) = s.image.at(c, y + y0, x + x0);
    }
  }
  for (auto g : s.gts) {
    const double cx = g.box.cx(), cy = g.box.cy();
    if (cx < patch.x1 || cx >= patch.x2 || cy < patch.y1 || cy >= patch.y2) continue;
    Box b{g.box.x1 - x0, g.box.y1 - y0, g.box.x2 - x0, g.box.y2 - y0};
    b = b.clipped(w, h);
    if (!b.valid()) continue;
    g.box = b;
    out.gts.push_back(g);
  }
  return out;
}

inline Sample resize_sample(const Sample& s, int size) {
  Sample out;
  out.image_id = s.image_id;
  out.image = resize(s.image, size, size);
  const double sx = static_cast<double>(size) / s.image.width;
  const double sy = static_cast<double>(size) / s.image.height;
  for (auto g : s.gts) {
    g.box = Box{g.box.x1 * sx, g.box.y1 * sy, g.box.x2 * sx, g.box.y2 * sy}.clipped(size, size);
    if (g.box.valid()) out.gts.push_back(g);
  }
  return out;
}

namespace detail {

// One SSD-style crop attempt: pick a min-IoU mode, then sample patches.
// Returns false when no acceptable patch was found.
inline bool random_crop(const Sample& s, std::mt19937_64& rng, int trials, Sample& out) {
  static const std::array<double, 6> kMinIou{0.0, 0.1, 0.3, 0.5, 0.7, 0.9};
  std::uniform_real_distribution<double> u(0, 1);
  const int mode = static_cast<int>(u(rng) * 7);
  if (mode == 6) {  // keep the whole image
    out = s;
    return true;
  }
  const double min_iou = kMinIou[mode];
  const int W = s.image.width, H = s.image.height;
  for (int t = 0; t < trials; ++t) {
    const double w = W * (0.3 + 0.7 * u(rng));
    const double h = H * (0.3 + 0.7 * u(rng));
    if (h / w < 0.5 || h / w > 2.0) continue;
    const double left = std::floor(u(rng) * (W - w));
    const double top = std::floor(u(rng) * (H - h));
    const Box patch{left, top, left + std::floor(w), top + std::floor(h)};
    if (!patch.valid()) continue;
    bool ok = false;
    for (const auto& g : s.gts) ok = ok || iou(patch, g.box) >= min_iou;
    if (!ok) continue;
    Sample c = crop_to(s, patch);
    if (c.gts.empty()) continue;
    out = std::move(c);
    return true;
  }
  return false;
}

}  // namespace detail

// Flip, expand, SSD crop, resize to `size`. If cropping keeps losing every
// object after the bounded retries, the flipped-only sample is used.
inline Sample augment(const Sample& s, std::uint64_t seed, int size, const AugmentOptions& opt = {}) {
  auto rng = stream(seed, static_cast<std::uint64_t>(s.image_id), 0xA6);
  std::uniform_real_distribution<double> u(0, 1);
  const Sample flipped = u(rng) < opt.flip_prob ? flip_horizontal(s) : s;
  if (flipped.gts.empty()) return resize_sample(flipped, size);
  Sample cur = flipped;
  if (u(rng) < opt.expand_prob && opt.max_expand > 1.0) {
    const double ratio = 1.0 + u(rng) * (opt.max_expand - 1.0);
    const int w = static_cast<int>(s.image.width * ratio), h = static_cast<int>(s.image.height * ratio);
    const int left = static_cast<int>(u(rng) * (w - s.image.width));
    const int top = static_cast<int>(u(rng) * (h - s.image.height));
    cur = expand(flipped, ratio, left, top, opt.fill);
  }
  if (opt.crop) {
    Sample cropped;
    bool ok = false;
    for (int r = 0; r < opt.crop_retries && !ok; ++r) {
      ok = detail::random_crop(cur, rng, opt.crop_trials, cropped);
    }
    cur = ok ? std::move(cropped) : flipped;
  }
  return resize_sample(cur, size);
}

}  // namespace promodet::harness
