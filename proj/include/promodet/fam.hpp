#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "promodet/nn/layers.hpp"

namespace promodet {

// Where the deformable offsets of the alignment conv come from.
enum class OffsetMode {
  kNone,            // regular convolution
  kImplicit,        // conv over the backbone feature
  kExplicitLoc,     // conv over the location deltas (dx, dy)
  kExplicitShape,   // conv over the shape deltas (dw, dh)
  kExplicitConcat,  // conv over both, concatenated
  kDisentangled,    // shared shift from location + per-point residual from shape
};

inline const char* to_string(OffsetMode m) {
  switch (m) {
    case OffsetMode::kNone: return "none";
    case OffsetMode::kImplicit: return "implicit";
    case OffsetMode::kExplicitLoc: return "explicit_loc";
    case OffsetMode::kExplicitShape: return "explicit_shape";
    case OffsetMode::kExplicitConcat: return "explicit_concat";
    case OffsetMode::kDisentangled: return "disentangled";
  }
  return "?";
}

inline OffsetMode offset_mode_from_string(const std::string& s) {
  for (OffsetMode m : {OffsetMode::kNone, OffsetMode::kImplicit, OffsetMode::kExplicitLoc,
                       OffsetMode::kExplicitShape, OffsetMode::kExplicitConcat,
                       OffsetMode::kDisentangled}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown offset mode '" + s + "'");
}

inline constexpr int kKernelPoints = 9;  // 3x3

// Location (dx, dy) and shape (dw, dh) channel groups of an anchor-major
// delta map (a0: dx dy dw dh, a1: ...).
template <typename T>
struct SplitAdjustment {
  nn::Var<T> loc;    // 2A channels: 4a, 4a+1
  nn::Var<T> shape;  // 2A channels: 4a+2, 4a+3
};

inline std::vector<int> location_channels(int anchors) {
  std::vector<int> idx;
  for (int a = 0; a < anchors; ++a) {
    idx.push_back(4 * a);
    idx.push_back(4 * a + 1);
  }
  return idx;
}

inline std::vector<int> shape_channels(int anchors) {
  std::vector<int> idx;
  for (int a = 0; a < anchors; ++a) {
    idx.push_back(4 * a + 2);
    idx.push_back(4 * a + 3);
  }
  return idx;
}

template <typename T>
SplitAdjustment<T> split_adjustment(nn::Tape<T>& tape, const nn::Var<T>& delta_map) {
  const int c = delta_map->value.c();
  if (c % 4 != 0) {
    throw ShapeError("split_adjustment: " + std::to_string(c) + " channels is not a multiple of 4");
  }
  return {nn::gather_channels(tape, delta_map, location_channels(c / 4)),
          nn::gather_channels(tape, delta_map, shape_channels(c / 4))};
}

// Per-location offsets, (dy, dx) pairs per kernel point in row-major point
// order. `shift` and `residual` are only set in disentangled mode.
template <typename T>
struct OffsetField {
  nn::Var<T> shift;     // c: 2 channels
  nn::Var<T> residual;  // delta_s: 2K channels
  nn::Var<T> composed;  // delta_D: 2K channels, null in kNone mode
};

// Offset-producing convolutions for one pyramid level. All weights start at
// zero so the aligned conv starts out as a regular convolution.
template <typename T>
class OffsetBranch {
 public:
  OffsetBranch() = default;
  OffsetBranch(nn::ParamStore<T>& store, const std::string& prefix, OffsetMode mode,
               int feature_channels, int anchors)
      : mode_(mode) {
    const int k2 = 2 * kKernelPoints;
    const int half = 2 * anchors;
    using nn::Init;
    switch (mode) {
      case OffsetMode::kNone:
        break;
      case OffsetMode::kImplicit:
        offset_ = nn::Conv2d<T>(store, prefix + ".offset", feature_channels, k2, 3, 1, -1, true,
                                Init::kZero);
        break;
      case OffsetMode::kExplicitLoc:
      case OffsetMode::kExplicitShape:
        offset_ = nn::Conv2d<T>(store, prefix + ".offset", half, k2, 3, 1, -1, true, Init::kZero);
        break;
      case OffsetMode::kExplicitConcat:
        offset_ = nn::Conv2d<T>(store, prefix + ".offset", 2 * half, k2, 3, 1, -1, true,
                                Init::kZero);
        break;
      case OffsetMode::kDisentangled:
        loc_ = nn::Conv2d<T>(store, prefix + ".loc", half, 2, 3, 1, -1, true, Init::kZero);
        shape_ = nn::Conv2d<T>(store, prefix + ".shape", half, k2, 3, 1, -1, true, Init::kZero);
        break;
    }
  }

  OffsetMode mode() const { return mode_; }
  bool needs_adjustment() const {
    return mode_ != OffsetMode::kNone && mode_ != OffsetMode::kImplicit;
  }

  OffsetField<T> operator()(nn::Tape<T>& tape, const nn::Var<T>& backbone_feat,
                            const SplitAdjustment<T>* split) const {
    if (needs_adjustment() && split == nullptr) {
      throw ConfigError("fam: offset mode '" + std::string(to_string(mode_)) +
                        "' needs the APM adjustment branch");
    }
    OffsetField<T> f;
    switch (mode_) {
      case OffsetMode::kNone:
        break;
      case OffsetMode::kImplicit:
        f.composed = offset_(tape, backbone_feat);
        break;
      case OffsetMode::kExplicitLoc:
        f.composed = offset_(tape, split->loc);
        break;
      case OffsetMode::kExplicitShape:
        f.composed = offset_(tape, split->shape);
        break;
      case OffsetMode::kExplicitConcat:
        f.composed = offset_(tape, nn::concat_channels(tape, split->loc, split->shape));
        break;
      case OffsetMode::kDisentangled: {
        f.shift = loc_(tape, split->loc);
        f.residual = shape_(tape, split->shape);
        std::vector<int> bcast;
        for (int k = 0; k < kKernelPoints; ++k) {
          bcast.push_back(0);
          bcast.push_back(1);
        }
        f.composed = nn::add(tape, nn::gather_channels(tape, f.shift, bcast), f.residual);
        break;
      }
    }
    return f;
  }

 private:
  OffsetMode mode_ = OffsetMode::kNone;
  nn::Conv2d<T> offset_, loc_, shape_;
};

namespace detail {

// Bilinear tap for one sample position; corners outside the map get zero
// weight (the map is zero-padded).
template <typename T>
struct SampleTap {
  int y0, x0;
  T ly, lx;
  bool in00, in01, in10, in11;
};

template <typename T>
SampleTap<T> make_tap(T py, T px, int h, int w) {
  SampleTap<T> t;
  const T fy = std::floor(py);
  const T fx = std::floor(px);
  // Far outside: park the tap so every corner is out of range.
  if (fy < T(-2) || fy > T(h + 1) || fx < T(-2) || fx > T(w + 1)) {
    t.y0 = -2;
    t.x0 = -2;
  } else {
    t.y0 = static_cast<int>(fy);
    t.x0 = static_cast<int>(fx);
  }
  t.ly = py - fy;
  t.lx = px - fx;
  const bool y0ok = t.y0 >= 0 && t.y0 < h;
  const bool y1ok = t.y0 + 1 >= 0 && t.y0 + 1 < h;
  const bool x0ok = t.x0 >= 0 && t.x0 < w;
  const bool x1ok = t.x0 + 1 >= 0 && t.x0 + 1 < w;
  t.in00 = y0ok && x0ok;
  t.in01 = y0ok && x1ok;
  t.in10 = y1ok && x0ok;
  t.in11 = y1ok && x1ok;
  return t;
}

template <typename T>
struct Corners {
  T v00, v01, v10, v11;
};

template <typename T>
Corners<T> read_corners(const T* plane, int w, const SampleTap<T>& t) {
  const std::size_t base = static_cast<std::size_t>(t.y0) * w + t.x0;
  return {t.in00 ? plane[base] : T(0), t.in01 ? plane[base + 1] : T(0),
          t.in10 ? plane[base + w] : T(0), t.in11 ? plane[base + w + 1] : T(0)};
}

template <typename T>
T interpolate(const Corners<T>& v, const SampleTap<T>& t) {
  return (1 - t.ly) * ((1 - t.lx) * v.v00 + t.lx * v.v01) +
         t.ly * ((1 - t.lx) * v.v10 + t.lx * v.v11);
}

// Taps for every (kernel point, output location) of one image.
template <typename T>
std::vector<SampleTap<T>> deform_taps(const T* offsets, int h, int w) {
  const int hw = h * w;
  std::vector<SampleTap<T>> taps(static_cast<std::size_t>(kKernelPoints) * hw);
  for (int k = 0; k < kKernelPoints; ++k) {
    const int ry = k / 3 - 1;
    const int rx = k % 3 - 1;
    const T* oy = offsets + static_cast<std::size_t>(2 * k) * hw;
    const T* ox = offsets + static_cast<std::size_t>(2 * k + 1) * hw;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int p = y * w + x;
        taps[static_cast<std::size_t>(k) * hw + p] =
            make_tap<T>(T(y + ry) + oy[p], T(x + rx) + ox[p], h, w);
      }
    }
  }
  return taps;
}

}  // namespace detail

// Deformable 3x3 convolution, stride 1. For output location p and kernel
// point k the input is sampled at p + r_k + offset_k(p) by bilinear
// interpolation. Gradients flow to the features, the weights, the bias and
// the offsets.
template <typename T>
nn::Var<T> deform_sample(nn::Tape<T>& tape, const nn::Var<T>& feat, const nn::Var<T>& offsets,
                         const nn::Var<T>& weight, const nn::Var<T>& bias) {
  const nn::Shape fs = feat->value.shape();
  const nn::Shape os = offsets->value.shape();
  const nn::Shape ws = weight->value.shape();
  if (os.n != fs.n || os.h != fs.h || os.w != fs.w || os.c != 2 * kKernelPoints) {
    throw ShapeError("deform_sample: offsets " + os.str() + " do not align with features " +
                     fs.str());
  }
  if (ws.c != fs.c || ws.h != 3 || ws.w != 3) {
    throw ShapeError("deform_sample: weight " + ws.str() + " expects 3x3 over " +
                     std::to_string(fs.c) + " channels");
  }
  for (T v : offsets->value.vec()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw GeometryError("deform_sample: non-finite offset");
    }
  }
  const int hw = fs.h * fs.w;
  const int kdim = fs.c * kKernelPoints;
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(fs.n) * kdim * hw);
  nn::Tensor<T> y({fs.n, ws.n, fs.h, fs.w});
  nn::CMatMap<T> wmat(weight->value.data(), ws.n, kdim);
  for (int i = 0; i < fs.n; ++i) {
    const auto taps = detail::deform_taps(offsets->value.image(i), fs.h, fs.w);
    T* col = cols->data() + static_cast<std::size_t>(i) * kdim * hw;
    for (int c = 0; c < fs.c; ++c) {
      const T* plane = feat->value.plane(i, c);
      for (int k = 0; k < kKernelPoints; ++k) {
        T* row = col + (static_cast<std::size_t>(c) * kKernelPoints + k) * hw;
        const auto* tk = taps.data() + static_cast<std::size_t>(k) * hw;
        for (int p = 0; p < hw; ++p) {
          row[p] = detail::interpolate(detail::read_corners(plane, fs.w, tk[p]), tk[p]);
        }
      }
    }
    nn::MatMap<T> out(y.image(i), ws.n, hw);
    out.noalias() = wmat * nn::CMatMap<T>(col, kdim, hw);
    if (bias) {
      for (int o = 0; o < ws.n; ++o) out.row(o).array() += bias->value[o];
    }
  }
  return tape.record(std::move(y), {feat, offsets, weight, bias}, [=]() {
    return [=](const nn::Tensor<T>& gy) {
      nn::CMatMap<T> wm(weight->value.data(), ws.n, kdim);
      std::vector<T> dcols(static_cast<std::size_t>(kdim) * hw);
      for (int i = 0; i < fs.n; ++i) {
        nn::CMatMap<T> go(gy.image(i), ws.n, hw);
        const T* col = cols->data() + static_cast<std::size_t>(i) * kdim * hw;
        if (bias && bias->requires_grad) {
          for (int o = 0; o < ws.n; ++o) bias->grad_buffer()[o] += go.row(o).sum();
        }
        if (weight->requires_grad) {
          nn::MatMap<T> gw(weight->grad_buffer().data(), ws.n, kdim);
          gw.noalias() += go * nn::CMatMap<T>(col, kdim, hw).transpose();
        }
        if (!feat->requires_grad && !offsets->requires_grad) continue;
        nn::MatMap<T>(dcols.data(), kdim, hw).noalias() = wm.transpose() * go;
        const auto taps = detail::deform_taps(offsets->value.image(i), fs.h, fs.w);
        T* gfeat = feat->requires_grad ? feat->grad_buffer().image(i) : nullptr;
        T* goff = offsets->requires_grad ? offsets->grad_buffer().image(i) : nullptr;
        for (int c = 0; c < fs.c; ++c) {
          const T* plane = feat->value.plane(i, c);
          T* gplane = gfeat ? gfeat + static_cast<std::size_t>(c) * hw : nullptr;
          for (int k = 0; k < kKernelPoints; ++k) {
            const T* drow = dcols.data() + (static_cast<std::size_t>(c) * kKernelPoints + k) * hw;
            const auto* tk = taps.data() + static_cast<std::size_t>(k) * hw;
            T* gdy = goff ? goff + static_cast<std::size_t>(2 * k) * hw : nullptr;
            T* gdx = goff ? goff + static_cast<std::size_t>(2 * k + 1) * hw : nullptr;
            for (int p = 0; p < hw; ++p) {
              const T g = drow[p];
              if (g == T(0)) continue;
              const auto& t = tk[p];
              if (gplane) {
                const std::size_t base = static_cast<std::size_t>(t.y0) * fs.w + t.x0;
                if (t.in00) gplane[base] += g * (1 - t.ly) * (1 - t.lx);
                if (t.in01) gplane[base + 1] += g * (1 - t.ly) * t.lx;
                if (t.in10) gplane[base + fs.w] += g * t.ly * (1 - t.lx);
                if (t.in11) gplane[base + fs.w + 1] += g * t.ly * t.lx;
              }
              if (goff) {
                const auto v = detail::read_corners(plane, fs.w, t);
                gdy[p] += g * ((1 - t.lx) * (v.v10 - v.v00) + t.lx * (v.v11 - v.v01));
                gdx[p] += g * ((1 - t.ly) * (v.v01 - v.v00) + t.ly * (v.v11 - v.v10));
              }
            }
          }
        }
      }
    };
  });
}

}  // namespace promodet
