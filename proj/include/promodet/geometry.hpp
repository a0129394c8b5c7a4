#pragma once

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "promodet/errors.hpp"

namespace promodet {

// Axis-aligned box in continuous pixel coordinates, corner form.
// Area is (x2 - x1) * (y2 - y1); there is no +1 pixel convention.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
           x2 > x1 && y2 > y1;
  }

  static Box from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }

  Box clipped(double width, double height) const {
    return {std::clamp(x1, 0.0, width), std::clamp(y1, 0.0, height), std::clamp(x2, 0.0, width),
            std::clamp(y2, 0.0, height)};
  }

  friend bool operator==(const Box&, const Box&) = default;
};

// Center shift normalized by anchor size, log size ratios.
struct BoxDeltas {
  double dx = 0, dy = 0, dw = 0, dh = 0;

  bool finite() const {
    return std::isfinite(dx) && std::isfinite(dy) && std::isfinite(dw) && std::isfinite(dh);
  }
  friend bool operator==(const BoxDeltas&, const BoxDeltas&) = default;
};

struct ScoredBox {
  Box box;
  double score = 0;
  int label = 0;
};

using BoxArray = std::vector<Box>;

namespace detail {

inline void require_valid(const Box& b, const char* what) {
  if (!b.valid()) {
    throw GeometryError(std::string(what) + ": degenerate or non-finite box");
  }
}

inline double overlap(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (iw > 0 && ih > 0) ? iw * ih : 0.0;
}

}  // namespace detail

inline double iou(const Box& a, const Box& b) {
  detail::require_valid(a, "iou");
  detail::require_valid(b, "iou");
  const double inter = detail::overlap(a, b);
  if (inter <= 0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

inline BoxDeltas encode(const Box& anchor, const Box& target) {
  detail::require_valid(anchor, "encode anchor");
  detail::require_valid(target, "encode target");
  return {(target.cx() - anchor.cx()) / anchor.width(),
          (target.cy() - anchor.cy()) / anchor.height(),
          std::log(target.width() / anchor.width()), std::log(target.height() / anchor.height())};
}

// Decoded sizes must stay representable in single precision, since boxes
// round-trip through float tensors.
inline Box decode(const Box& anchor, const BoxDeltas& d) {
  detail::require_valid(anchor, "decode anchor");
  if (!d.finite()) throw GeometryError("decode: non-finite deltas");
  if (d == BoxDeltas{}) return anchor;  // exact identity, no center/size round trip
  const double w = anchor.width() * std::exp(d.dw);
  const double h = anchor.height() * std::exp(d.dh);
  const double cx = anchor.cx() + d.dx * anchor.width();
  const double cy = anchor.cy() + d.dy * anchor.height();
  if (!(w <= FLT_MAX && h <= FLT_MAX && std::abs(cx) <= FLT_MAX && std::abs(cy) <= FLT_MAX)) {
    throw GeometryError("decode: box size overflows after exp");
  }
  return Box::from_center(cx, cy, w, h);
}

namespace detail {

// Strict ordering used to pick the next box: higher score first, then
// coordinates and label, so results do not depend on input order.
inline bool ranks_before(const ScoredBox& a, const ScoredBox& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.box.x1, a.box.y1, a.box.x2, a.box.y2, a.label) <
         std::tie(b.box.x1, b.box.y1, b.box.x2, b.box.y2, b.label);
}

}  // namespace detail

// Soft-NMS with the linear kernel: overlapping boxes are decayed by
// (1 - IoU) rather than deleted; anything below `score_floor` is dropped.
inline std::vector<ScoredBox> soft_nms_linear(std::span<const ScoredBox> boxes,
                                              double iou_threshold, double score_floor) {
  std::vector<ScoredBox> pool;
  pool.reserve(boxes.size());
  for (const auto& b : boxes) {
    if (!(b.score >= 0.0 && b.score <= 1.0)) {
      throw GeometryError("soft_nms_linear: score outside [0, 1]");
    }
    detail::require_valid(b.box, "soft_nms_linear");
    if (b.score >= score_floor) pool.push_back(b);
  }
  std::vector<ScoredBox> kept;
  kept.reserve(pool.size());
  while (!pool.empty()) {
    auto best = std::min_element(pool.begin(), pool.end(), detail::ranks_before);
    std::iter_swap(best, pool.end() - 1);
    const ScoredBox sel = pool.back();
    pool.pop_back();
    kept.push_back(sel);
    const double sel_area = sel.box.area();
    std::size_t out = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      ScoredBox b = pool[i];
      const double inter = detail::overlap(sel.box, b.box);
      if (inter > 0) {
        const double ov = inter / (sel_area + b.box.area() - inter);
        if (ov > iou_threshold) b.score *= (1.0 - ov);
      }
      if (b.score >= score_floor) pool[out++] = b;
    }
    pool.resize(out);
  }
  std::stable_sort(kept.begin(), kept.end(), detail::ranks_before);
  return kept;
}

}  // namespace promodet
