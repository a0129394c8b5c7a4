#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promodet/detector.hpp"
#include "promodet/harness/dataset.hpp"

namespace promodet::harness {

// Area ranges by ground-truth area, in squared pixels.
struct AreaRange {
  std::string name;
  double lo, hi;
};

inline const std::array<AreaRange, 4>& area_ranges() {
  static const std::array<AreaRange, 4> r{{{"all", 0, 1e10},
                                           {"small", 0, 32.0 * 32},
                                           {"medium", 32.0 * 32, 96.0 * 96},
                                           {"large", 96.0 * 96, 1e10}}};
  return r;
}

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
  return t;
}

struct MapTable {
  std::vector<double> iou_thresholds;
  // ap[area][threshold], averaged over classes that have ground truth in
  // that area range; -1 when no class qualifies.
  std::map<std::string, std::vector<double>> ap;
  std::map<int, double> class_ap50;  // per class, area "all"

  double ap_mean(const std::string& area = "all") const {
    const auto& v = ap.at(area);
    double s = 0;
    int n = 0;
    for (double a : v) {
      if (a >= 0) {
        s += a;
        ++n;
      }
    }
    return n ? s / n : -1;
  }
  double ap_at(double thr, const std::string& area = "all") const {
    for (std::size_t k = 0; k < iou_thresholds.size(); ++k) {
      if (std::abs(iou_thresholds[k] - thr) < 1e-9) return ap.at(area)[k];
    }
    throw ConfigError("evaluate_map: threshold not evaluated");
  }
};

namespace detail {

// 101-point interpolated AP from scored TP flags (already sorted by score).
inline double interpolated_ap(const std::vector<bool>& tp, int n_gt) {
  const std::size_t nd = tp.size();
  std::vector<double> rc(nd), pr(nd);
  double ctp = 0;
  for (std::size_t i = 0; i < nd; ++i) {
    ctp += tp[i] ? 1 : 0;
    rc[i] = ctp / n_gt;
    pr[i] = ctp / static_cast<double>(i + 1);
  }
  for (std::size_t i = nd; i-- > 1;) pr[i - 1] = std::max(pr[i - 1], pr[i]);
  double sum = 0;
  for (int r = 0; r <= 100; ++r) {
    const double thr = r / 100.0;
    const auto it = std::lower_bound(rc.begin(), rc.end(), thr);
    if (it != rc.end()) sum += pr[static_cast<std::size_t>(it - rc.begin())];
  }
  return sum / 101.0;
}

// Greedy matching per image in descending score order; a ground truth
// outside the area range is "ignored": matching it neither helps nor
// hurts, and unmatched detections outside the range are ignored too.
inline double class_ap(const std::vector<std::vector<Detection>>& dets,
                       const std::vector<std::vector<GroundTruth>>& gts, int label, double thr,
                       const AreaRange& area, int max_dets, bool* has_gt) {
  int n_gt = 0;
  for (const auto& g : gts) {
    for (const auto& x : g) {
      if (x.label == label && x.box.area() >= area.lo && x.box.area() <= area.hi) ++n_gt;
    }
  }
  *has_gt = n_gt > 0;
  if (n_gt == 0) return -1;
  struct Flag {
    double score;
    std::size_t order;
    bool tp;
  };
  std::vector<Flag> flags;
  std::size_t order = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    // Top-k per image and class by score, like the reference evaluator.
    std::vector<Detection> d;
    for (const auto& x : dets[i]) {
      if (x.label == label) d.push_back(x);
    }
    std::stable_sort(d.begin(), d.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int>(d.size()) > max_dets) d.resize(max_dets);
    std::vector<const GroundTruth*> g;
    for (const auto& x : gts[i]) {
      if (x.label == label) g.push_back(&x);
    }
    // Non-ignored ground truth first so matches prefer it.
    std::stable_sort(g.begin(), g.end(), [&](const GroundTruth* a, const GroundTruth* b) {
      const bool ia = !(a->box.area() >= area.lo && a->box.area() <= area.hi);
      const bool ib = !(b->box.area() >= area.lo && b->box.area() <= area.hi);
      return ia < ib;
    });
    std::vector<bool> taken(g.size(), false);
    for (const auto& det : d) {
      double best = std::min(thr, 1 - 1e-10);
      int m = -1;
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (taken[k]) continue;
        const bool ign = !(g[k]->box.area() >= area.lo && g[k]->box.area() <= area.hi);
        if (m >= 0) {
          const bool m_ign = !(g[m]->box.area() >= area.lo && g[m]->box.area() <= area.hi);
          if (!m_ign && ign) break;
        }
        const double v = iou(det.box, g[k]->box);
        if (v < best) continue;
        best = v;
        m = static_cast<int>(k);
      }
      bool ignored;
      if (m >= 0) {
        taken[m] = true;
        ignored = !(g[m]->box.area() >= area.lo && g[m]->box.area() <= area.hi);
      } else {
        ignored = !(det.box.area() >= area.lo && det.box.area() <= area.hi);
      }
      if (!ignored) flags.push_back({det.score, order++, m >= 0});
    }
  }
  std::stable_sort(flags.begin(), flags.end(), [](const Flag& a, const Flag& b) {
    return a.score != b.score ? a.score > b.score : a.order < b.order;
  });
  std::vector<bool> tp;
  for (const auto& f : flags) tp.push_back(f.tp);
  return interpolated_ap(tp, n_gt);
}

}  // namespace detail

// Detections and ground truths are per image, in the same order.
inline MapTable evaluate_map(const std::vector<std::vector<Detection>>& dets,
                             const std::vector<std::vector<GroundTruth>>& gts, int num_classes,
                             std::vector<double> iou_thresholds = coco_iou_thresholds(),
                             int max_dets = 100) {
  if (dets.size() != gts.size()) {
    throw ShapeError("evaluate_map: detections and ground truths cover different images");
  }
  MapTable t;
  t.iou_thresholds = iou_thresholds;
  for (const auto& area : area_ranges()) {
    std::vector<double> row;
    for (double thr : iou_thresholds) {
      double sum = 0;
      int n = 0;
      for (int c = 1; c <= num_classes; ++c) {
        bool has_gt;
        const double ap = detail::class_ap(dets, gts, c, thr, area, max_dets, &has_gt);
        if (!has_gt) continue;
        sum += ap;
        ++n;
        if (area.name == "all" && std::abs(thr - 0.5) < 1e-9) t.class_ap50[c] = ap;
      }
      row.push_back(n ? sum / n : -1);
    }
    t.ap[area.name] = row;
  }
  return t;
}

// COCO results records: {image_id, category_id, bbox [x, y, w, h], score}.
inline nlohmann::json coco_results(const Dataset& ds,
                                   const std::vector<std::vector<Detection>>& dets) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (const auto& d : dets[i]) {
      const auto it = ds.category_of_label.find(d.label);
      out.push_back({{"image_id", ds.samples[i].image_id},
                     {"category_id", it == ds.category_of_label.end() ? d.label : it->second},
                     {"bbox", {d.box.x1, d.box.y1, d.box.width(), d.box.height()}},
                     {"score", d.score}});
    }
  }
  return out;
}

}  // namespace promodet::harness
