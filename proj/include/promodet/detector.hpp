#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "promodet/anchors.hpp"
#include "promodet/apm.hpp"
#include "promodet/fam.hpp"
#include "promodet/geometry.hpp"

namespace promodet {

inline constexpr int kNumLevels = 6;

struct FamConfig {
  std::array<OffsetMode, kNumLevels> modes{OffsetMode::kDisentangled, OffsetMode::kDisentangled,
                                           OffsetMode::kDisentangled, OffsetMode::kDisentangled,
                                           OffsetMode::kNone, OffsetMode::kNone};
  bool detach = false;  // stop offset gradients from reaching the APM deltas

  static FamConfig uniform(OffsetMode m) {
    FamConfig f;
    for (int l = 0; l < 4; ++l) f.modes[l] = m;
    return f;
  }

  // The two coarsest levels never take offsets.
  void validate(std::span<const LevelConfig> levels) const {
    for (std::size_t l = 0; l < modes.size(); ++l) {
      const bool allowed = l < levels.size() ? levels[l].fam_enabled : false;
      if (modes[l] != OffsetMode::kNone && !allowed) {
        throw ConfigError("fam.level" + std::to_string(l + 1) +
                          ".mode: feature alignment is not applied on this level");
      }
    }
  }
};

// Per-level class logits ((C+1) per anchor, background first) and box
// deltas (4 per anchor).
template <typename T>
struct DetectionOutput {
  std::vector<nn::Var<T>> cls;
  std::vector<nn::Var<T>> box;
  std::vector<OffsetField<T>> offsets;
};

// CBR3 -> aligned 3x3 conv (deformable where the level has an offset mode)
// -> ReLU -> sibling 3x3 class / box convs.
template <typename T>
class DetectionHead {
 public:
  DetectionHead(nn::ParamStore<T>& store, const AnchorSet& anchors, int width, int num_classes,
                const FamConfig& fam, double background_prior)
      : num_classes_(num_classes), fam_(fam) {
    const int c1 = num_classes + 1;
    // Background logit offset so the initial background probability is
    // `background_prior`; 0.0 leaves every class bias at zero.
    const double bg_bias =
        background_prior > 0 ? std::log(background_prior * num_classes / (1 - background_prior))
                             : 0.0;
    for (int l = 0; l < anchors.num_levels(); ++l) {
      const std::string name = "head.level" + std::to_string(l + 1);
      const int a = anchors.per_location[l];
      Level lv;
      lv.cbr = nn::CbrBlock<T>(store, name + ".cbr", width, width, 3);
      lv.align = nn::Conv2d<T>(store, name + ".align", width, width, 3);
      lv.offsets = OffsetBranch<T>(store, "fam.level" + std::to_string(l + 1),
                                   l < kNumLevels ? fam.modes[l] : OffsetMode::kNone, width, a);
      lv.cls = nn::Conv2d<T>(store, name + ".cls", width, c1 * a, 3, 1, -1, true, nn::Init::kSmall);
      for (int k = 0; k < a; ++k) lv.cls.bias->value()[k * c1] = static_cast<T>(bg_bias);
      lv.box = nn::Conv2d<T>(store, name + ".box", width, 4 * a, 3, 1, -1, true, nn::Init::kSmall);
      levels_.push_back(std::move(lv));
    }
  }

  int num_classes() const { return num_classes_; }

  DetectionOutput<T> operator()(nn::Tape<T>& tape, const PyramidFeatures<T>& pyr,
                                const ApmOutput<T>* apm, bool training) const {
    DetectionOutput<T> out;
    for (std::size_t l = 0; l < levels_.size(); ++l) {
      const Level& lv = levels_[l];
      auto x = lv.cbr(tape, pyr.levels[l], training);
      OffsetField<T> field;
      if (lv.offsets.mode() == OffsetMode::kNone) {
        x = lv.align(tape, x);
      } else {
        std::optional<SplitAdjustment<T>> split;
        if (lv.offsets.needs_adjustment()) {
          if (apm == nullptr) {
            throw ConfigError("fam.level" + std::to_string(l + 1) +
                              ".mode: requires APM output, but the APM is disabled");
          }
          auto deltas = apm->deltas[l];
          if (fam_.detach) deltas = nn::detach(tape, deltas);
          split = split_adjustment(tape, deltas);
        }
        field = lv.offsets(tape, pyr.levels[l], split ? &*split : nullptr);
        x = deform_sample(tape, x, field.composed, lv.align.weight->var, lv.align.bias->var);
      }
      x = nn::relu(tape, x);
      out.cls.push_back(lv.cls(tape, x));
      out.box.push_back(lv.box(tape, x));
      out.offsets.push_back(std::move(field));
    }
    return out;
  }

 private:
  struct Level {
    nn::CbrBlock<T> cbr;
    nn::Conv2d<T> align;
    OffsetBranch<T> offsets;
    nn::Conv2d<T> cls;
    nn::Conv2d<T> box;
  };
  int num_classes_;
  FamConfig fam_;
  std::vector<Level> levels_;
};

// Sum over the four coordinates of 0.5 d^2 (|d| < 1) or |d| - 0.5.
inline double smooth_l1(const BoxDeltas& pred, const BoxDeltas& target,
                        std::array<double, 4>* grad = nullptr) {
  if (!pred.finite() || !target.finite()) throw GeometryError("smooth_l1: non-finite input");
  const std::array<double, 4> d{pred.dx - target.dx, pred.dy - target.dy, pred.dw - target.dw,
                                pred.dh - target.dh};
  double loss = 0;
  for (int j = 0; j < 4; ++j) {
    const double a = std::abs(d[j]);
    if (a < 1.0) {
      loss += 0.5 * d[j] * d[j];
      if (grad) (*grad)[j] = d[j];
    } else {
      loss += a - 0.5;
      if (grad) (*grad)[j] = d[j] > 0 ? 1.0 : -1.0;
    }
  }
  return loss;
}

// Raw (unnormalized) loss sums and positive counts. `total()` applies the
// max(N, 1) normalizers.
struct LossReport {
  double apm_score = 0;  // binary cross-entropy over APM positives and negatives
  double apm_box = 0;    // smooth L1 over APM positives
  double det_cls = 0;    // softmax cross-entropy over detection positives and negatives
  double det_box = 0;    // smooth L1 over detection positives
  long n_apm = 0;
  long n_det = 0;

  double apm_norm() const { return 1.0 / std::max<long>(n_apm, 1); }
  double det_norm() const { return 1.0 / std::max<long>(n_det, 1); }
  double total() const {
    return (apm_score + apm_box) * apm_norm() + (det_cls + det_box) * det_norm();
  }
  LossReport& operator+=(const LossReport& o) {
    apm_score += o.apm_score;
    apm_box += o.apm_box;
    det_cls += o.det_cls;
    det_box += o.det_box;
    n_apm += o.n_apm;
    n_det += o.n_det;
    return *this;
  }
};

struct LossOptions {
  int num_classes = 1;
  int apm_max_negatives = 0;  // 0 = all
  bool ohem = false;          // keep only the hardest ohem_ratio * N_d negatives
  double ohem_ratio = 3.0;
};

// Per-anchor inputs for one image. Empty APM spans mean the branch is off;
// a null apm_match means the APM is disabled and contributes no loss.
struct LossInputs {
  std::span<const Box> anchors;
  std::span<const Box> promoted;
  std::span<const Box> gts;
  std::span<const int> gt_labels;  // 1..C
  std::span<const double> apm_logits;
  std::span<const BoxDeltas> apm_deltas;
  std::span<const double> cls_logits;  // (C+1) per anchor
  std::span<const BoxDeltas> det_deltas;
  const MatchResult* apm_match = nullptr;
  const MatchResult* det_match = nullptr;
};

// Gradients of the raw sums, same layouts as the inputs.
struct LossGrads {
  std::vector<double> apm_logits;
  std::vector<double> apm_deltas;  // 4 per anchor
  std::vector<double> cls_logits;
  std::vector<double> det_deltas;  // 4 per anchor
};

namespace detail {

inline double bce_with_logit(double z, double target, double* grad) {
  const double p = 1.0 / (1.0 + std::exp(-z));
  if (grad) *grad = p - target;
  return std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
}

inline double softmax_ce(const double* z, int n, int target, double* grad) {
  const double m = *std::max_element(z, z + n);
  double sum = 0;
  for (int j = 0; j < n; ++j) sum += std::exp(z[j] - m);
  const double lse = m + std::log(sum);
  if (grad) {
    for (int j = 0; j < n; ++j) grad[j] = std::exp(z[j] - lse) - (j == target ? 1.0 : 0.0);
  }
  return lse - z[target];
}

// Indices of the `keep` largest losses (ties: lower index first).
inline std::vector<std::size_t> hardest(const std::vector<std::pair<double, std::size_t>>& losses,
                                        std::size_t keep) {
  auto sorted = losses;
  keep = std::min(keep, sorted.size());
  std::partial_sort(sorted.begin(), sorted.begin() + keep, sorted.end(),
                    [](const auto& a, const auto& b) {
                      return a.first != b.first ? a.first > b.first : a.second < b.second;
                    });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep; ++i) out.push_back(sorted[i].second);
  return out;
}

}  // namespace detail

// Two-stage detection loss for one image. APM terms use the labels of the
// initial anchors, detection terms the (gated) labels of the promoted
// anchors; regression targets are encoded against the respective anchors.
inline LossReport total_loss(const LossInputs& in, const LossOptions& opt,
                             LossGrads* grads = nullptr) {
  const std::size_t n = in.anchors.size();
  const int c1 = opt.num_classes + 1;
  if (in.promoted.size() != n || in.cls_logits.size() != n * c1 || in.det_deltas.size() != n) {
    throw ShapeError("total_loss: per-anchor inputs do not align");
  }
  if (in.gt_labels.size() != in.gts.size()) {
    throw ShapeError("total_loss: ground-truth labels do not align with boxes");
  }
  if (in.det_match == nullptr || in.det_match->labels.size() != n) {
    throw ShapeError("total_loss: detection labels missing or misaligned");
  }
  if (grads) {
    grads->apm_logits.assign(in.apm_logits.size(), 0.0);
    grads->apm_deltas.assign(4 * in.apm_deltas.size(), 0.0);
    grads->cls_logits.assign(n * c1, 0.0);
    grads->det_deltas.assign(4 * n, 0.0);
  }
  LossReport r;

  if (in.apm_match) {
    const MatchResult& m = *in.apm_match;
    if (m.labels.size() != n) throw ShapeError("total_loss: APM labels misaligned");
    r.n_apm = static_cast<long>(m.count(Label::kPositive));
    if (!in.apm_logits.empty()) {
      if (in.apm_logits.size() != n) throw ShapeError("total_loss: APM scores misaligned");
      std::vector<std::pair<double, std::size_t>> neg;
      for (std::size_t i = 0; i < n; ++i) {
        if (m.labels[i] == Label::kPositive) {
          double g;
          r.apm_score += detail::bce_with_logit(in.apm_logits[i], 1.0, &g);
          if (grads) grads->apm_logits[i] = g;
        } else if (m.labels[i] == Label::kNegative) {
          neg.emplace_back(detail::bce_with_logit(in.apm_logits[i], 0.0, nullptr), i);
        }
      }
      std::vector<std::size_t> keep;
      if (opt.apm_max_negatives > 0 &&
          neg.size() > static_cast<std::size_t>(opt.apm_max_negatives)) {
        keep = detail::hardest(neg, opt.apm_max_negatives);
      } else {
        for (const auto& [_, i] : neg) keep.push_back(i);
      }
      for (std::size_t i : keep) {
        double g;
        r.apm_score += detail::bce_with_logit(in.apm_logits[i], 0.0, &g);
        if (grads) grads->apm_logits[i] = g;
      }
    }
    if (!in.apm_deltas.empty()) {
      if (in.apm_deltas.size() != n) throw ShapeError("total_loss: APM deltas misaligned");
      for (std::size_t i = 0; i < n; ++i) {
        if (m.labels[i] != Label::kPositive) continue;
        const BoxDeltas target = encode(in.anchors[i], in.gts[m.matched_gt[i]]);
        std::array<double, 4> g;
        r.apm_box += smooth_l1(in.apm_deltas[i], target, &g);
        if (grads) std::copy(g.begin(), g.end(), grads->apm_deltas.begin() + 4 * i);
      }
    }
  }

  const MatchResult& m = *in.det_match;
  r.n_det = static_cast<long>(m.count(Label::kPositive));
  std::vector<std::pair<double, std::size_t>> neg;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = in.cls_logits.data() + i * c1;
    double* g = grads ? grads->cls_logits.data() + i * c1 : nullptr;
    if (m.labels[i] == Label::kPositive) {
      const int label = in.gt_labels[m.matched_gt[i]];
      if (label < 1 || label > opt.num_classes) {
        throw ConfigError("total_loss: ground-truth label " + std::to_string(label) +
                          " outside 1.." + std::to_string(opt.num_classes));
      }
      r.det_cls += detail::softmax_ce(z, c1, label, g);
      const BoxDeltas target = encode(in.promoted[i], in.gts[m.matched_gt[i]]);
      std::array<double, 4> gb;
      r.det_box += smooth_l1(in.det_deltas[i], target, &gb);
      if (grads) std::copy(gb.begin(), gb.end(), grads->det_deltas.begin() + 4 * i);
    } else if (m.labels[i] == Label::kNegative) {
      neg.emplace_back(detail::softmax_ce(z, c1, 0, nullptr), i);
    }
  }
  std::vector<std::size_t> keep;
  if (opt.ohem) {
    keep = detail::hardest(
        neg, static_cast<std::size_t>(opt.ohem_ratio * std::max<long>(r.n_det, 1)));
  } else {
    for (const auto& [_, i] : neg) keep.push_back(i);
  }
  for (std::size_t i : keep) {
    r.det_cls += detail::softmax_ce(in.cls_logits.data() + i * c1, c1, 0,
                                    grads ? grads->cls_logits.data() + i * c1 : nullptr);
  }
  return r;
}

struct Detection {
  Box box;
  int label = 0;  // 1..C
  double score = 0;
};

struct InferenceOptions {
  double theta = 0.01;            // APM positivity gate
  double conf_threshold = 0.01;   // per-class confidence floor
  double nms_iou = 0.3;           // soft-NMS overlap threshold N_t
  double nms_sigma = 0.5;         // carried for the Gaussian kernel; unused by the linear one
  int max_detections = 300;
};

// Per-anchor candidates to final detections: drop anchors that failed the
// APM gate, drop class confidences below the floor, run linear soft-NMS per
// class, keep the global top-k and clip to the image.
inline std::vector<Detection> postprocess(std::span<const Box> boxes,
                                          std::span<const double> apm_scores,
                                          std::span<const double> class_probs, int num_classes,
                                          const InferenceOptions& opt, double image_w,
                                          double image_h) {
  const std::size_t n = boxes.size();
  const int c1 = num_classes + 1;
  if (apm_scores.size() != n || class_probs.size() != n * c1) {
    throw ShapeError("postprocess: per-anchor inputs do not align");
  }
  std::vector<ScoredBox> all;
  for (int c = 1; c <= num_classes; ++c) {
    std::vector<ScoredBox> cand;
    for (std::size_t i = 0; i < n; ++i) {
      if (apm_scores[i] < opt.theta) continue;
      const double p = class_probs[i * c1 + c];
      if (p < opt.conf_threshold) continue;
      cand.push_back({boxes[i], std::min(1.0, p), c});
    }
    auto kept = soft_nms_linear(cand, opt.nms_iou, opt.conf_threshold);
    all.insert(all.end(), kept.begin(), kept.end());
  }
  std::stable_sort(all.begin(), all.end(), detail::ranks_before);
  std::vector<Detection> out;
  for (const auto& sb : all) {
    if (static_cast<int>(out.size()) >= opt.max_detections) break;
    const Box b = sb.box.clipped(image_w, image_h);
    if (!b.valid()) continue;  // entirely outside the image
    out.push_back({b, sb.label, sb.score});
  }
  return out;
}

inline std::vector<double> softmax_rows(std::span<const double> logits, int width) {
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r * width < logits.size(); ++r) {
    const double* z = logits.data() + r * width;
    const double m = *std::max_element(z, z + width);
    double sum = 0;
    for (int j = 0; j < width; ++j) sum += (out[r * width + j] = std::exp(z[j] - m));
    for (int j = 0; j < width; ++j) out[r * width + j] /= sum;
  }
  return out;
}

}  // namespace promodet
