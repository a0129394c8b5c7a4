#pragma once

// Reference implementations written independently of the library: plain
// loops, no shared helpers beyond the Box value type.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "promodet/anchors.hpp"
#include "promodet/geometry.hpp"

namespace oracle {

using promodet::Box;

inline double iou(const Box& a, const Box& b) {
  const double ix1 = a.x1 > b.x1 ? a.x1 : b.x1;
  const double iy1 = a.y1 > b.y1 ? a.y1 : b.y1;
  const double ix2 = a.x2 < b.x2 ? a.x2 : b.x2;
  const double iy2 = a.y2 < b.y2 ? a.y2 : b.y2;
  if (ix2 <= ix1 || iy2 <= iy1) return 0.0;
  const double inter = (ix2 - ix1) * (iy2 - iy1);
  const double ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return inter / ua;
}

// labels: 1 positive, 0 negative, -1 ignore.
struct Match {
  std::vector<int> labels;
  std::vector<int> gt;
};

inline Match match(const std::vector<Box>& anchors, const std::vector<Box>& gts, double pos,
                   double neg) {
  const int n = static_cast<int>(anchors.size());
  const int m = static_cast<int>(gts.size());
  Match r{std::vector<int>(n, 0), std::vector<int>(n, -1)};
  std::vector<std::vector<double>> M(n, std::vector<double>(m));
  for (int a = 0; a < n; ++a) {
    for (int g = 0; g < m; ++g) M[a][g] = oracle::iou(anchors[a], gts[g]);
  }
  std::vector<bool> forced(n, false);
  for (int g = 0; g < m; ++g) {
    int best = -1;
    for (int a = 0; a < n; ++a) {
      if (forced[a]) continue;
      if (best < 0 || M[a][g] > M[best][g]) best = a;
    }
    if (best < 0) continue;
    forced[best] = true;
    r.labels[best] = 1;
    r.gt[best] = g;
  }
  for (int a = 0; a < n; ++a) {
    if (forced[a]) continue;
    double mx = -1;
    int arg = -1;
    for (int g = 0; g < m; ++g) {
      if (M[a][g] > mx) {
        mx = M[a][g];
        arg = g;
      }
    }
    if (m == 0 || mx < neg) {
      r.labels[a] = 0;
    } else if (mx >= pos) {
      r.labels[a] = 1;
      r.gt[a] = arg;
    } else {
      r.labels[a] = -1;
    }
  }
  return r;
}

struct Scored {
  Box box;
  double score;
};

// Greedy linear soft-NMS over an explicit "alive" mask.
inline std::vector<Scored> soft_nms(std::vector<Scored> in, double nt, double floor) {
  const std::size_t n = in.size();
  std::vector<bool> alive(n);
  for (std::size_t i = 0; i < n; ++i) alive[i] = in[i].score >= floor;
  std::vector<Scored> out;
  for (;;) {
    int best = -1;
    for (std::size_t i = 0; i < n; ++i) {
      if (alive[i] && (best < 0 || in[i].score > in[best].score)) best = static_cast<int>(i);
    }
    if (best < 0) break;
    alive[best] = false;
    out.push_back(in[best]);
    for (std::size_t i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      const double o = oracle::iou(in[best].box, in[i].box);
      if (o > nt) in[i].score = in[i].score * (1 - o);
      if (in[i].score < floor) alive[i] = false;
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Scored& a, const Scored& b) { return a.score > b.score; });
  return out;
}

struct Deltas {
  double dx, dy, dw, dh;
};

inline Deltas encode(const Box& a, const Box& g) {
  const double aw = a.x2 - a.x1, ah = a.y2 - a.y1;
  const double gw = g.x2 - g.x1, gh = g.y2 - g.y1;
  return {((g.x1 + g.x2) / 2 - (a.x1 + a.x2) / 2) / aw, ((g.y1 + g.y2) / 2 - (a.y1 + a.y2) / 2) / ah,
          std::log(gw / aw), std::log(gh / ah)};
}

inline double smooth_l1(double d) {
  d = std::fabs(d);
  return d < 1 ? 0.5 * d * d : d - 0.5;
}

// Loss of one image written straight from the formula, scalar by scalar.
struct LossCase {
  std::vector<Box> anchors, promoted, gts;
  std::vector<int> gt_labels;
  int classes = 1;
  std::vector<double> apm_logit;  // per anchor
  std::vector<Deltas> apm_delta;
  std::vector<std::vector<double>> cls_logit;  // per anchor, classes+1
  std::vector<Deltas> det_delta;
  std::vector<double> apm_score;  // sigmoid(apm_logit), for the gate
  double theta = 0.01;
};

struct LossTerms {
  double lb = 0, lr_apm = 0, lcls = 0, lr_det = 0;
  int n_apm = 0, n_det = 0;
  double total() const {
    return (lb + lr_apm) / std::max(n_apm, 1) + (lcls + lr_det) / std::max(n_det, 1);
  }
};

inline LossTerms loss(const LossCase& c) {
  LossTerms t;
  const Match m0 = match(c.anchors, c.gts, 0.5, 0.3);
  Match m1 = match(c.promoted, c.gts, 0.5, 0.3);
  for (std::size_t i = 0; i < c.anchors.size(); ++i) {
    if (m1.labels[i] == 0 && c.apm_score[i] < c.theta) m1.labels[i] = -1;
  }
  for (std::size_t i = 0; i < c.anchors.size(); ++i) {
    const double p = 1 / (1 + std::exp(-c.apm_logit[i]));
    if (m0.labels[i] == 1) {
      ++t.n_apm;
      t.lb += -std::log(p);
      const Deltas g = oracle::encode(c.anchors[i], c.gts[m0.gt[i]]);
      const Deltas& x = c.apm_delta[i];
      t.lr_apm += smooth_l1(x.dx - g.dx) + smooth_l1(x.dy - g.dy) + smooth_l1(x.dw - g.dw) +
                  smooth_l1(x.dh - g.dh);
    } else if (m0.labels[i] == 0) {
      t.lb += -std::log(1 - p);
    }
    double z = 0;
    for (double v : c.cls_logit[i]) z += std::exp(v);
    if (m1.labels[i] == 1) {
      ++t.n_det;
      const int y = c.gt_labels[m1.gt[i]];
      t.lcls += -std::log(std::exp(c.cls_logit[i][y]) / z);
      const Deltas g = oracle::encode(c.promoted[i], c.gts[m1.gt[i]]);
      const Deltas& x = c.det_delta[i];
      t.lr_det += smooth_l1(x.dx - g.dx) + smooth_l1(x.dy - g.dy) + smooth_l1(x.dw - g.dw) +
                  smooth_l1(x.dh - g.dh);
    } else if (m1.labels[i] == 0) {
      t.lcls += -std::log(std::exp(c.cls_logit[i][0]) / z);
    }
  }
  return t;
}

inline Box random_box(std::mt19937_64& rng, double extent, double min_side, double max_side) {
  std::uniform_real_distribution<double> u(0, 1);
  const double w = min_side + (max_side - min_side) * u(rng);
  const double h = min_side + (max_side - min_side) * u(rng);
  const double x = u(rng) * (extent - w), y = u(rng) * (extent - h);
  return {x, y, x + w, y + h};
}

// 101-point interpolated AP written out by hand: precision envelope, then
// sampled at recall 0, 0.01, ..., 1.
inline double ap101(const std::vector<double>& recall, const std::vector<double>& precision) {
  double s = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    double best = 0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
      if (recall[i] >= r - 1e-12) best = std::max(best, precision[i]);
    }
    s += best;
  }
  return s / 101;
}

}  // namespace oracle
