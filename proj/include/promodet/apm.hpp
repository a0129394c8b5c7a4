#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "promodet/anchors.hpp"
#include "promodet/backbone.hpp"
#include "promodet/geometry.hpp"
#include "promodet/layout.hpp"

namespace promodet {

struct ApmConfig {
  bool enabled = true;
  bool scoring = true;     // positivity classifier (APM_C)
  bool adjustment = true;  // coarse box regressor (APM_R)
  int head_depth = 0;      // extra CBR3 blocks before the two heads
  int max_negatives = 0;   // cap on negatives in the score loss, 0 = all

  void validate() const {
    if (enabled && !scoring && !adjustment) {
      throw ConfigError("apm: scoring and adjustment are both disabled while apm.enabled = true");
    }
    if (head_depth < 0) throw ConfigError("apm.head_depth: must be >= 0");
    if (max_negatives < 0) throw ConfigError("apm.max_negatives: must be >= 0");
  }
};

// Per-level APM maps: A score logits and 4A deltas (dx, dy, dw, dh per
// anchor). A disabled branch yields null score maps (scores read as 1) or
// constant zero delta maps.
template <typename T>
struct ApmOutput {
  std::vector<nn::Var<T>> score_logits;
  std::vector<nn::Var<T>> deltas;
  bool scoring = true;
  bool adjustment = true;

  std::vector<double> logits(const AnchorSet& anchors, int image) const {
    if (!scoring) return {};
    return flatten_levels<T>(score_logits, anchors, image, 1);
  }

  std::vector<double> scores(const AnchorSet& anchors, int image) const {
    if (!scoring) return std::vector<double>(anchors.size(), 1.0);
    auto s = logits(anchors, image);
    for (auto& v : s) v = 1.0 / (1.0 + std::exp(-v));
    return s;
  }

  std::vector<BoxDeltas> box_deltas(const AnchorSet& anchors, int image) const {
    std::vector<BoxDeltas> out(anchors.size());
    if (!adjustment) return out;
    const auto flat = flatten_levels<T>(deltas, anchors, image, 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = {flat[4 * i], flat[4 * i + 1], flat[4 * i + 2], flat[4 * i + 3]};
    }
    return out;
  }
};

template <typename T>
class ApmHeads {
 public:
  ApmHeads(nn::ParamStore<T>& store, const AnchorSet& anchors, int width, const ApmConfig& cfg)
      : cfg_(cfg) {
    cfg.validate();
    const double prior = std::log(0.01 / 0.99);
    for (int l = 0; l < anchors.num_levels(); ++l) {
      const std::string name = "apm.level" + std::to_string(l + 1);
      const int a = anchors.per_location[l];
      Level lv;
      for (int d = 0; d < cfg.head_depth; ++d) {
        lv.tower.emplace_back(store, name + ".tower" + std::to_string(d + 1), width, width, 3);
      }
      if (cfg.scoring) {
        lv.score = nn::Conv2d<T>(store, name + ".score", width, a, 3, 1, -1, true, nn::Init::kSmall,
                                 prior);
      }
      if (cfg.adjustment) {
        lv.delta = nn::Conv2d<T>(store, name + ".delta", width, 4 * a, 3, 1, -1, true,
                                 nn::Init::kZero);
      }
      lv.anchors = a;
      levels_.push_back(std::move(lv));
    }
  }

  const ApmConfig& config() const { return cfg_; }

  ApmOutput<T> operator()(nn::Tape<T>& tape, const PyramidFeatures<T>& pyr, bool training) const {
    ApmOutput<T> out;
    out.scoring = cfg_.scoring;
    out.adjustment = cfg_.adjustment;
    for (std::size_t l = 0; l < levels_.size(); ++l) {
      const Level& lv = levels_[l];
      auto x = pyr.levels[l];
      for (const auto& blk : lv.tower) x = blk(tape, x, training);
      out.score_logits.push_back(cfg_.scoring ? lv.score(tape, x) : nullptr);
      if (cfg_.adjustment) {
        out.deltas.push_back(lv.delta(tape, x));
      } else {
        const auto& s = x->value.shape();
        out.deltas.push_back(tape.constant(nn::Tensor<T>({s.n, 4 * lv.anchors, s.h, s.w})));
      }
    }
    return out;
  }

 private:
  struct Level {
    std::vector<nn::CbrBlock<T>> tower;
    nn::Conv2d<T> score;
    nn::Conv2d<T> delta;
    int anchors = 0;
  };
  ApmConfig cfg_;
  std::vector<Level> levels_;
};

struct PromotedAnchors {
  std::vector<Box> boxes;
  std::vector<double> scores;
  int clamped = 0;  // boxes that had to be widened to the 1 px minimum
};

// Limit on |dw|, |dh| before exponentiation (a 62.5x size change).
inline constexpr double kMaxLogRatio = 4.135166556742356;  // log(1000 / 16)

// Decodes with the log-ratio clamp and the 1 px minimum size; returns true
// when the minimum size kicked in.
inline bool decode_clamped(const Box& anchor, BoxDeltas d, Box& out) {
  d.dw = std::clamp(d.dw, -kMaxLogRatio, kMaxLogRatio);
  d.dh = std::clamp(d.dh, -kMaxLogRatio, kMaxLogRatio);
  Box b = decode(anchor, d);
  bool clamped = false;
  if (b.width() < 1.0) {
    const double cx = b.cx();
    b.x1 = cx - 0.5;
    b.x2 = cx + 0.5;
    clamped = true;
  }
  if (b.height() < 1.0) {
    const double cy = b.cy();
    b.y1 = cy - 0.5;
    b.y2 = cy + 0.5;
    clamped = true;
  }
  out = b;
  return clamped;
}

// One promoted box per initial anchor, same order; nothing is clipped or
// filtered here.
inline PromotedAnchors promote(std::span<const Box> anchors, std::span<const BoxDeltas> deltas,
                               std::span<const double> scores) {
  if (deltas.size() != anchors.size() || scores.size() != anchors.size()) {
    throw ShapeError("promote: deltas/scores do not align with the anchors");
  }
  PromotedAnchors p;
  p.boxes.resize(anchors.size());
  p.scores.assign(scores.begin(), scores.end());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (decode_clamped(anchors[i], deltas[i], p.boxes[i])) ++p.clamped;
  }
  return p;
}

template <typename T>
PromotedAnchors promote(const AnchorSet& anchors, const ApmOutput<T>& apm, int image) {
  const auto deltas = apm.box_deltas(anchors, image);
  const auto scores = apm.scores(anchors, image);
  return promote(anchors.boxes, deltas, scores);
}

}  // namespace promodet
