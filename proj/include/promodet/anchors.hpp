#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "promodet/errors.hpp"
#include "promodet/geometry.hpp"

namespace promodet {

struct LevelConfig {
  int stride = 8;
  double base_scale = 32;
  double second_scale = 45.25;  // used by the duplicated ratio-1 anchor
  std::vector<double> aspect_ratios{1, 1, 2, 3, 0.5, 1.0 / 3};
  bool fam_enabled = true;

  int anchors_per_location() const { return static_cast<int>(aspect_ratios.size()); }
};

// Feature-map side for the extra level: stride-2 reduction when the last
// decoder map is even, full collapse to 1x1 otherwise (3 -> 1 at 384).
inline int extra_level_size(int last_size) { return last_size % 2 == 0 ? last_size / 2 : 1; }

// Six-level layout: strides 8..128 plus one derived level; six aspect
// ratios on the first four levels and four on the last two. Scales follow
// `scale_factor * stride`, the duplicated ratio-1 anchor uses the geometric
// mean with the next level's scale.
inline std::vector<LevelConfig> default_levels(int input_size, double scale_factor = 4.0) {
  const std::vector<double> six{1, 1, 2, 3, 0.5, 1.0 / 3};
  const std::vector<double> four{1, 1, 2, 0.5};
  std::vector<int> strides{8, 16, 32, 64, 128};
  const int d5 = input_size / 128;
  if (d5 < 1) throw ConfigError("input_size: must be at least 128");
  strides.push_back(input_size / extra_level_size(d5));
  std::vector<LevelConfig> levels;
  for (std::size_t k = 0; k < strides.size(); ++k) {
    LevelConfig lc;
    lc.stride = strides[k];
    lc.base_scale = scale_factor * strides[k];
    const double next = k + 1 < strides.size() ? scale_factor * strides[k + 1] : 2 * lc.base_scale;
    lc.second_scale = std::sqrt(lc.base_scale * next);
    lc.aspect_ratios = k < 4 ? six : four;
    lc.fam_enabled = k < 4;
    levels.push_back(std::move(lc));
  }
  return levels;
}

// Anchors of all levels, level-major; within a level location-major
// (row, then column) and aspect-ratio order within a location.
struct AnchorSet {
  std::vector<Box> boxes;
  std::vector<int> level_of;
  std::vector<int> level_offset;  // first anchor index of each level
  std::vector<int> per_location;  // A per level
  std::vector<int> feature_size;  // side of the square feature map per level
  int input_size = 0;

  int num_levels() const { return static_cast<int>(per_location.size()); }
  int level_count(int l) const {
    return feature_size[l] * feature_size[l] * per_location[l];
  }
  std::size_t size() const { return boxes.size(); }
  // Anchor index for (level, row, col, a).
  int index(int l, int y, int x, int a) const {
    return level_offset[l] + (y * feature_size[l] + x) * per_location[l] + a;
  }
};

inline AnchorSet generate_anchors(int input_size, std::span<const LevelConfig> levels) {
  if (levels.empty()) throw ConfigError("anchors.levels: empty level list");
  AnchorSet set;
  set.input_size = input_size;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const LevelConfig& lc = levels[l];
    if (lc.stride <= 0 || input_size % lc.stride != 0) {
      throw ConfigError("anchors.level" + std::to_string(l + 1) +
                        ".stride: must divide the input size");
    }
    if (lc.aspect_ratios.empty()) {
      throw ConfigError("anchors.level" + std::to_string(l + 1) + ".aspect_ratios: empty");
    }
    const int fs = input_size / lc.stride;
    set.level_offset.push_back(static_cast<int>(set.boxes.size()));
    set.per_location.push_back(lc.anchors_per_location());
    set.feature_size.push_back(fs);
    // Shapes per location; the second ratio-1 entry takes second_scale.
    std::vector<std::pair<double, double>> shapes;
    bool seen_unit = false;
    for (double r : lc.aspect_ratios) {
      double scale = lc.base_scale;
      if (r == 1.0) {
        if (seen_unit) scale = lc.second_scale;
        seen_unit = true;
      }
      shapes.emplace_back(scale * std::sqrt(r), scale / std::sqrt(r));
    }
    for (int y = 0; y < fs; ++y) {
      for (int x = 0; x < fs; ++x) {
        const double cx = (x + 0.5) * lc.stride;
        const double cy = (y + 0.5) * lc.stride;
        for (const auto& [w, h] : shapes) {
          set.boxes.push_back(Box::from_center(cx, cy, w, h));
          set.level_of.push_back(static_cast<int>(l));
        }
      }
    }
  }
  return set;
}

enum class Label : std::int8_t { kNegative = 0, kPositive = 1, kIgnore = 2 };

struct MatchResult {
  std::vector<Label> labels;
  std::vector<int> matched_gt;  // -1 unless positive
  std::vector<double> max_iou;

  std::size_t count(Label l) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), l));
  }
};

// Two-step assignment. First every ground truth claims its best anchor,
// exclusively and in index order (a taken anchor passes the claim to the
// next best). Then remaining anchors are positive at IoU >= pos_thr,
// negative below neg_thr, ignored in between.
inline MatchResult match(std::span<const Box> anchors, std::span<const Box> gts,
                         double pos_thr = 0.5, double neg_thr = 0.3) {
  if (!(pos_thr > neg_thr)) throw ConfigError("match: pos_thr must exceed neg_thr");
  for (const Box& g : gts) detail::require_valid(g, "match ground truth");
  const std::size_t n = anchors.size();
  MatchResult r;
  r.labels.assign(n, Label::kNegative);
  r.matched_gt.assign(n, -1);
  r.max_iou.assign(n, 0.0);
  if (gts.empty()) return r;

  std::vector<double> best_gt_iou(n, -1.0);
  std::vector<int> best_gt(n, -1);
  std::vector<double> ious(n * gts.size());
  for (std::size_t a = 0; a < n; ++a) {
    const Box& ab = anchors[a];
    const double area = ab.area();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double inter = detail::overlap(ab, gts[g]);
      const double v = inter > 0 ? inter / (area + gts[g].area() - inter) : 0.0;
      ious[a * gts.size() + g] = v;
      if (v > best_gt_iou[a]) {
        best_gt_iou[a] = v;
        best_gt[a] = static_cast<int>(g);
      }
    }
    r.max_iou[a] = best_gt_iou[a];
  }

  std::vector<char> claimed(n, 0);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    int pick = -1;
    double pick_iou = -1.0;
    for (std::size_t a = 0; a < n; ++a) {
      if (claimed[a]) continue;
      const double v = ious[a * gts.size() + g];
      if (v > pick_iou) {
        pick_iou = v;
        pick = static_cast<int>(a);
      }
    }
    if (pick < 0) continue;  // more ground truths than anchors
    claimed[pick] = 1;
    r.labels[pick] = Label::kPositive;
    r.matched_gt[pick] = static_cast<int>(g);
  }

  for (std::size_t a = 0; a < n; ++a) {
    if (claimed[a]) continue;
    const double v = best_gt_iou[a];
    if (v >= pos_thr) {
      r.labels[a] = Label::kPositive;
      r.matched_gt[a] = best_gt[a];
    } else if (v < neg_thr) {
      r.labels[a] = Label::kNegative;
    } else {
      r.labels[a] = Label::kIgnore;
    }
  }
  return r;
}

// Negatives whose positivity score is below theta are dropped from training.
template <typename Scalar>
MatchResult gate_negatives(MatchResult m, std::span<const Scalar> scores, double theta = 0.01) {
  if (scores.size() != m.labels.size()) {
    throw ShapeError("gate_negatives: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(m.labels.size()) + " anchors");
  }
  if (!(theta > 0.0 && theta < 1.0)) throw ConfigError("theta: must lie in (0, 1)");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (m.labels[i] == Label::kNegative && static_cast<double>(scores[i]) < theta) {
      m.labels[i] = Label::kIgnore;
    }
  }
  return m;
}

struct ImbalanceStats {
  static constexpr int kBins = 5;  // [0.5,0.6) ... [0.9,1.0]

  long positives = 0;
  long negatives = 0;
  long ignored = 0;
  std::array<long, kBins> iou_histogram{};

  friend bool operator==(const ImbalanceStats&, const ImbalanceStats&) = default;
};

inline ImbalanceStats summarize(const MatchResult& m) {
  ImbalanceStats s;
  for (std::size_t i = 0; i < m.labels.size(); ++i) {
    switch (m.labels[i]) {
      case Label::kPositive: {
        ++s.positives;
        const double v = m.max_iou[i];
        if (v >= 0.5) {
          int bin = 0;
          for (double edge : {0.6, 0.7, 0.8, 0.9}) bin += v >= edge ? 1 : 0;
          ++s.iou_histogram[bin];
        }
        break;
      }
      case Label::kNegative:
        ++s.negatives;
        break;
      case Label::kIgnore:
        ++s.ignored;
        break;
    }
  }
  return s;
}

using MatchFn = std::function<MatchResult(std::span<const Box>, std::span<const Box>)>;

// Label statistics for the initial and the promoted anchors of one image,
// both run through the same matcher.
inline std::pair<ImbalanceStats, ImbalanceStats> census(std::span<const Box> before,
                                                        std::span<const Box> after,
                                                        std::span<const Box> gts,
                                                        const MatchFn& match_fn) {
  if (before.size() != after.size()) {
    throw ShapeError("census: before/after anchor arrays differ in length");
  }
  return {summarize(match_fn(before, gts)), summarize(match_fn(after, gts))};
}

}  // namespace promodet
