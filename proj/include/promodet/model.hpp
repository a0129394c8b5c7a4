#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promodet/anchors.hpp"
#include "promodet/apm.hpp"
#include "promodet/backbone.hpp"
#include "promodet/detector.hpp"
#include "promodet/layout.hpp"

namespace promodet {

struct GroundTruth {
  Box box;
  int label = 1;  // 1..C, background is 0
};

struct ModelConfig {
  BackboneConfig backbone;
  int num_classes = 3;
  double anchor_scale = 4.0;  // base anchor side = anchor_scale * stride
  ApmConfig apm;
  FamConfig fam;
  double theta = 0.01;
  double pos_iou = 0.5;
  double neg_iou = 0.3;
  bool ohem = false;
  double ohem_ratio = 3.0;
  double background_prior = 0.0;  // 0 = zero class bias
  InferenceOptions inference;
  std::uint64_t seed = 0;

  std::vector<LevelConfig> levels() const {
    return default_levels(backbone.input_size, anchor_scale);
  }

  void validate() const {
    backbone.validate();
    apm.validate();
    if (num_classes < 1) throw ConfigError("model.num_classes: must be >= 1");
    if (anchor_scale <= 0) throw ConfigError("anchors.scale: must be > 0");
    if (!(theta > 0 && theta < 1)) throw ConfigError("apm.theta: must lie in (0, 1)");
    if (!(pos_iou > neg_iou)) throw ConfigError("match.pos_iou: must exceed match.neg_iou");
    if (ohem_ratio <= 0) throw ConfigError("loss.ohem_ratio: must be > 0");
    if (background_prior < 0 || background_prior >= 1) {
      throw ConfigError("head.background_prior: must lie in [0, 1)");
    }
    const auto lv = levels();
    fam.validate(lv);
    for (int l = 0; l < kNumLevels; ++l) {
      const OffsetMode m = fam.modes[l];
      if (m == OffsetMode::kNone || m == OffsetMode::kImplicit) continue;
      if (!apm.enabled || !apm.adjustment) {
        throw ConfigError("fam.level" + std::to_string(l + 1) + ".mode: '" + to_string(m) +
                          "' needs apm.enabled and apm.adjustment");
      }
    }
  }
};

template <typename T>
struct ForwardResult {
  PyramidFeatures<T> pyramid;
  std::optional<ApmOutput<T>> apm;
  DetectionOutput<T> det;
};

// Per-image labelling of one forward pass: initial-anchor match (APM stage),
// promoted anchors and the gated promoted-anchor match (detection stage).
struct ImageTargets {
  std::optional<MatchResult> apm_match;
  PromotedAnchors promoted;
  MatchResult det_match;
};

struct SgdOptions {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg), store_(cfg.seed) {
    cfg_.validate();
    const auto lv = cfg_.levels();
    anchors_ = generate_anchors(cfg_.backbone.input_size, lv);
    backbone_ = std::make_unique<Backbone<T>>(store_, cfg_.backbone);
    if (cfg_.apm.enabled) {
      apm_ = std::make_unique<ApmHeads<T>>(store_, anchors_, backbone_->width(), cfg_.apm);
    }
    head_ = std::make_unique<DetectionHead<T>>(store_, anchors_, backbone_->width(),
                                               cfg_.num_classes, cfg_.fam, cfg_.background_prior);
  }

  const ModelConfig& config() const { return cfg_; }
  const AnchorSet& anchors() const { return anchors_; }
  nn::ParamStore<T>& store() { return store_; }
  const nn::ParamStore<T>& store() const { return store_; }
  int input_size() const { return cfg_.backbone.input_size; }

  ForwardResult<T> forward(nn::Tape<T>& tape, const nn::Tensor<T>& images, bool training) const {
    const auto& s = images.shape();
    if (s.c != 3 || s.h != input_size() || s.w != input_size()) {
      throw ShapeError("model input " + s.str() + ", expected Nx3x" +
                       std::to_string(input_size()) + "x" + std::to_string(input_size()));
    }
    ForwardResult<T> r;
    r.pyramid = (*backbone_)(tape, tape.constant(images), training);
    if (apm_) r.apm = (*apm_)(tape, r.pyramid, training);
    r.det = (*head_)(tape, r.pyramid, r.apm ? &*r.apm : nullptr, training);
    return r;
  }

  PromotedAnchors promoted(const ForwardResult<T>& r, int image) const {
    if (!r.apm) {
      return {anchors_.boxes, std::vector<double>(anchors_.size(), 1.0), 0};
    }
    return promote(anchors_, *r.apm, image);
  }

  ImageTargets targets(const ForwardResult<T>& r, int image,
                       std::span<const GroundTruth> gts) const {
    std::vector<Box> boxes;
    for (const auto& g : gts) boxes.push_back(g.box);
    ImageTargets t;
    t.promoted = promoted(r, image);
    if (r.apm) t.apm_match = match(anchors_.boxes, boxes, cfg_.pos_iou, cfg_.neg_iou);
    t.det_match = match(t.promoted.boxes, boxes, cfg_.pos_iou, cfg_.neg_iou);
    if (r.apm && r.apm->scoring) {
      t.det_match = gate_negatives<double>(t.det_match, t.promoted.scores, cfg_.theta);
    }
    return t;
  }

  LossOptions loss_options() const {
    LossOptions o;
    o.num_classes = cfg_.num_classes;
    o.apm_max_negatives = cfg_.apm.max_negatives;
    o.ohem = cfg_.ohem;
    o.ohem_ratio = cfg_.ohem_ratio;
    return o;
  }

  // Loss of a batch with gradients seeded into the head maps; sums and
  // positive counts are pooled over the batch before normalization.
  LossReport loss(nn::Tape<T>& /*tape*/, const ForwardResult<T>& r,
                  const std::vector<std::vector<GroundTruth>>& gts, bool seed_grads) const {
    const int n = static_cast<int>(gts.size());
    const int c1 = cfg_.num_classes + 1;
    LossReport total;
    std::vector<LossGrads> grads(n);
    for (int i = 0; i < n; ++i) {
      const ImageTargets t = targets(r, i, gts[i]);
      std::vector<Box> boxes;
      std::vector<int> labels;
      for (const auto& g : gts[i]) {
        boxes.push_back(g.box);
        labels.push_back(g.label);
      }
      const auto cls = flatten_levels<T>(r.det.cls, anchors_, i, c1);
      const auto box_flat = flatten_levels<T>(r.det.box, anchors_, i, 4);
      const auto det_deltas = to_deltas(box_flat);
      std::vector<double> apm_logits;
      std::vector<BoxDeltas> apm_deltas;
      if (r.apm) {
        apm_logits = r.apm->logits(anchors_, i);
        if (r.apm->adjustment) apm_deltas = r.apm->box_deltas(anchors_, i);
      }
      LossInputs in;
      in.anchors = anchors_.boxes;
      in.promoted = t.promoted.boxes;
      in.gts = boxes;
      in.gt_labels = labels;
      in.apm_logits = apm_logits;
      in.apm_deltas = apm_deltas;
      in.cls_logits = cls;
      in.det_deltas = det_deltas;
      in.apm_match = t.apm_match ? &*t.apm_match : nullptr;
      in.det_match = &t.det_match;
      total += total_loss(in, loss_options(), seed_grads ? &grads[i] : nullptr);
    }
    if (seed_grads) {
      const double an = total.apm_norm();
      const double dn = total.det_norm();
      for (int i = 0; i < n; ++i) {
        auto& g = grads[i];
        for (auto& v : g.apm_logits) v *= an;
        for (auto& v : g.apm_deltas) v *= an;
        for (auto& v : g.cls_logits) v *= dn;
        for (auto& v : g.det_deltas) v *= dn;
        scatter(r.det.cls, i, c1, g.cls_logits);
        scatter(r.det.box, i, 4, g.det_deltas);
        if (r.apm) {
          if (r.apm->scoring) scatter(r.apm->score_logits, i, 1, g.apm_logits);
          if (r.apm->adjustment) scatter(r.apm->deltas, i, 4, g.apm_deltas);
        }
      }
    }
    return total;
  }

  // One SGD step with momentum and L2 weight decay.
  LossReport train_step(const nn::Tensor<T>& images,
                        const std::vector<std::vector<GroundTruth>>& gts, const SgdOptions& opt) {
    if (static_cast<int>(gts.size()) != images.n()) {
      throw ShapeError("train_step: " + std::to_string(gts.size()) + " annotation lists for " +
                       std::to_string(images.n()) + " images");
    }
    nn::Tape<T> tape(true);
    store_.zero_grad();
    const auto r = forward(tape, images, true);
    const LossReport rep = loss(tape, r, gts, true);
    tape.backward();
    for (auto& [_, p] : store_.params()) {
      auto& w = p->value();
      if (p->momentum.empty()) p->momentum = nn::Tensor<T>(w.shape());
      const bool has_grad = !p->var->grad.empty();
      T* wv = w.data();
      T* mv = p->momentum.data();
      const T* gv = has_grad ? p->var->grad.data() : nullptr;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double g = (gv ? gv[k] : 0.0) + opt.weight_decay * wv[k];
        mv[k] = static_cast<T>(opt.momentum * mv[k] + g);
        wv[k] -= static_cast<T>(opt.lr * mv[k]);
      }
    }
    return rep;
  }

  // Final boxes and class probabilities of one image from a forward pass.
  struct Candidates {
    std::vector<Box> boxes;
    std::vector<double> apm_scores;
    std::vector<double> class_probs;
  };

  Candidates candidates(const ForwardResult<T>& r, int image) const {
    const int c1 = cfg_.num_classes + 1;
    const PromotedAnchors p = promoted(r, image);
    const auto deltas = to_deltas(flatten_levels<T>(r.det.box, anchors_, image, 4));
    Candidates c;
    c.boxes.resize(anchors_.size());
    for (std::size_t k = 0; k < anchors_.size(); ++k) decode_clamped(p.boxes[k], deltas[k], c.boxes[k]);
    c.apm_scores = p.scores;
    c.class_probs = softmax_rows(flatten_levels<T>(r.det.cls, anchors_, image, c1), c1);
    return c;
  }

  std::vector<std::vector<Detection>> infer(const nn::Tensor<T>& images) const {
    nn::Tape<T> tape(false);
    const auto r = forward(tape, images, false);
    std::vector<std::vector<Detection>> out;
    const double side = input_size();
    for (int i = 0; i < images.n(); ++i) {
      const auto c = candidates(r, i);
      out.push_back(postprocess(c.boxes, c.apm_scores, c.class_probs, cfg_.num_classes,
                                cfg_.inference, side, side));
    }
    return out;
  }

 private:
  static std::vector<BoxDeltas> to_deltas(const std::vector<double>& flat) {
    std::vector<BoxDeltas> d(flat.size() / 4);
    for (std::size_t k = 0; k < d.size(); ++k) {
      d[k] = {flat[4 * k], flat[4 * k + 1], flat[4 * k + 2], flat[4 * k + 3]};
    }
    return d;
  }

  void scatter(const std::vector<nn::Var<T>>& maps, int image, int per_anchor,
               const std::vector<double>& flat) const {
    for (int l = 0; l < anchors_.num_levels(); ++l) {
      auto& node = *maps[l];
      if (!node.requires_grad) continue;
      scatter_anchor_values<T>(node.grad_buffer(), image, anchors_.per_location[l], per_anchor,
                               flat.data() + static_cast<std::size_t>(anchors_.level_offset[l]) *
                                                 per_anchor);
    }
  }

  ModelConfig cfg_;
  nn::ParamStore<T> store_;
  AnchorSet anchors_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::unique_ptr<ApmHeads<T>> apm_;
  std::unique_ptr<DetectionHead<T>> head_;
};

}  // namespace promodet
