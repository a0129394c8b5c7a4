#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "promodet/nn/autograd.hpp"

namespace promodet::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int in_h, in_w, kh, kw, stride, pad, out_h, out_w, dilation;

  static ConvGeometry make(int in_h, int in_w, int kh, int kw, int stride, int pad,
                           int dilation = 1) {
    ConvGeometry g{in_h, in_w, kh, kw, stride, pad, 0, 0, dilation};
    g.out_h = (in_h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    g.out_w = (in_w + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    if (g.out_h <= 0 || g.out_w <= 0) {
      throw ShapeError("convolution produces an empty output");
    }
    return g;
  }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// cols is (C*kh*kw) x (out_h*out_w), row-major.
template <typename T>
void im2col(const T* src, int channels, const ConvGeometry& g, T* cols) {
  const int out_plane = g.out_h * g.out_w;
  for (int c = 0; c < channels; ++c) {
    const T* plane = src + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c * g.kh + ky) * g.kw + kx) * out_plane;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky * g.dilation;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* line = plane + iy * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx * g.dilation;
            dst[ox] = (ix >= 0 && ix < g.in_w) ? line[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int channels, const ConvGeometry& g, T* dst) {
  const int out_plane = g.out_h * g.out_w;
  for (int c = 0; c < channels; ++c) {
    T* plane = dst + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c * g.kh + ky) * g.kw + kx) * out_plane;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky * g.dilation;
          if (iy < 0 || iy >= g.in_h) continue;
          T* line = plane + iy * g.in_w;
          const T* src = row + oy * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx * g.dilation;
            if (ix >= 0 && ix < g.in_w) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Plain forward convolution on raw tensors. weight is (Cout, Cin, kh, kw);
// bias may be null.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         int stride, int pad, std::vector<T>* cols_cache = nullptr,
                         int dilation = 1) {
  const Shape ws = weight.shape();
  if (ws.c != x.c()) {
    throw ShapeError("conv2d: input has " + std::to_string(x.c()) + " channels, weight expects " +
                     std::to_string(ws.c));
  }
  const auto g = ConvGeometry::make(x.h(), x.w(), ws.h, ws.w, stride, pad, dilation);
  const int k = ws.c * ws.h * ws.w;
  const int hw = g.out_h * g.out_w;
  Tensor<T> y({x.n(), ws.n, g.out_h, g.out_w});
  CMatMap<T> wmat(weight.data(), ws.n, k);
  std::vector<T> local;
  std::vector<T>& cols = cols_cache ? *cols_cache : local;
  if (!g.pointwise()) cols.resize(static_cast<std::size_t>(x.n()) * k * hw);
  for (int i = 0; i < x.n(); ++i) {
    const T* cptr = x.image(i);
    if (!g.pointwise()) {
      T* dst = cols.data() + static_cast<std::size_t>(i) * k * hw;
      im2col(x.image(i), x.c(), g, dst);
      cptr = dst;
    }
    MatMap<T> out(y.image(i), ws.n, hw);
    out.noalias() = wmat * CMatMap<T>(cptr, k, hw);
    if (bias) {
      for (int o = 0; o < ws.n; ++o) out.row(o).array() += (*bias)[o];
    }
  }
  return y;
}

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              int stride, int pad, int dilation = 1) {
  auto cols = std::make_shared<std::vector<T>>();
  const bool cache = tape.enabled() && (x->requires_grad || weight->requires_grad ||
                                        (bias && bias->requires_grad));
  Tensor<T> y = conv2d_forward(x->value, weight->value, bias ? &bias->value : nullptr, stride, pad,
                               cache ? cols.get() : nullptr, dilation);
  const Shape ys = y.shape();
  return tape.record(std::move(y), {x, weight, bias}, [=]() {
    return [=](const Tensor<T>& gy) {
      const Shape xs = x->value.shape();
      const Shape ws = weight->value.shape();
      const auto g = ConvGeometry::make(xs.h, xs.w, ws.h, ws.w, stride, pad, dilation);
      const int k = ws.c * ws.h * ws.w;
      const int hw = ys.h * ys.w;
      CMatMap<T> wmat(weight->value.data(), ws.n, k);
      if (bias && bias->requires_grad) {
        Tensor<T>& gb = bias->grad_buffer();
        for (int i = 0; i < ys.n; ++i) {
          for (int o = 0; o < ys.c; ++o) {
            const T* p = gy.plane(i, o);
            T s = 0;
            for (int j = 0; j < hw; ++j) s += p[j];
            gb[o] += s;
          }
        }
      }
      std::vector<T> dcols(g.pointwise() ? 0 : static_cast<std::size_t>(k) * hw);
      for (int i = 0; i < ys.n; ++i) {
        CMatMap<T> go(gy.image(i), ys.c, hw);
        const T* cptr = g.pointwise() ? x->value.image(i)
                                      : cols->data() + static_cast<std::size_t>(i) * k * hw;
        if (weight->requires_grad) {
          MatMap<T> gw(weight->grad_buffer().data(), ws.n, k);
          gw.noalias() += go * CMatMap<T>(cptr, k, hw).transpose();
        }
        if (x->requires_grad) {
          Tensor<T>& gx = x->grad_buffer();
          if (g.pointwise()) {
            MatMap<T>(gx.image(i), k, hw).noalias() += wmat.transpose() * go;
          } else {
            MatMap<T>(dcols.data(), k, hw).noalias() = wmat.transpose() * go;
            col2im(dcols.data(), xs.c, g, gx.image(i));
          }
        }
      }
    };
  });
}

// Per-channel batch normalization. In training mode, statistics come from
// the batch (over N, H, W) and the running buffers are updated; a channel
// with a single element per batch falls back to the running statistics.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

template <typename T>
Var<T> batch_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  BatchNormState<T>& state, bool training) {
  const Shape s = x->value.shape();
  const std::size_t count = static_cast<std::size_t>(s.n) * s.plane();
  const bool batch_stats = training && count > 1;
  std::vector<T> mean(s.c), inv_std(s.c);
  for (int c = 0; c < s.c; ++c) {
    if (batch_stats) {
      double sum = 0, sq = 0;
      for (int i = 0; i < s.n; ++i) {
        const T* p = x->value.plane(i, c);
        for (std::size_t j = 0; j < s.plane(); ++j) {
          sum += p[j];
          sq += static_cast<double>(p[j]) * p[j];
        }
      }
      const double m = sum / count;
      const double var = std::max(0.0, sq / count - m * m);
      mean[c] = static_cast<T>(m);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      state.running_mean[c] = (1 - state.momentum) * state.running_mean[c] + state.momentum * T(m);
      state.running_var[c] = (1 - state.momentum) * state.running_var[c] +
                             state.momentum * T(var * count / (count - 1));
    } else {
      mean[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + state.eps);
    }
  }
  Tensor<T> y(s);
  for (int i = 0; i < s.n; ++i) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = x->value.plane(i, c);
      T* q = y.plane(i, c);
      const T a = gamma->value[c] * inv_std[c];
      const T b = beta->value[c] - mean[c] * a;
      for (std::size_t j = 0; j < s.plane(); ++j) q[j] = p[j] * a + b;
    }
  }
  return tape.record(std::move(y), {x, gamma, beta}, [=]() {
    return [=](const Tensor<T>& gy) {
      const std::size_t plane = s.plane();
      for (int c = 0; c < s.c; ++c) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (int i = 0; i < s.n; ++i) {
          const T* p = x->value.plane(i, c);
          const T* d = gy.plane(i, c);
          for (std::size_t j = 0; j < plane; ++j) {
            sum_dy += d[j];
            sum_dy_xhat += static_cast<double>(d[j]) * (p[j] - mean[c]) * inv_std[c];
          }
        }
        if (gamma->requires_grad) gamma->grad_buffer()[c] += static_cast<T>(sum_dy_xhat);
        if (beta->requires_grad) beta->grad_buffer()[c] += static_cast<T>(sum_dy);
        if (!x->requires_grad) continue;
        Tensor<T>& gx = x->grad_buffer();
        const T scale = gamma->value[c] * inv_std[c];
        const T mdy = static_cast<T>(sum_dy / count);
        const T mdyx = static_cast<T>(sum_dy_xhat / count);
        for (int i = 0; i < s.n; ++i) {
          const T* p = x->value.plane(i, c);
          const T* d = gy.plane(i, c);
          T* q = gx.plane(i, c);
          if (batch_stats) {
            for (std::size_t j = 0; j < plane; ++j) {
              const T xhat = (p[j] - mean[c]) * inv_std[c];
              q[j] += scale * (d[j] - mdy - xhat * mdyx);
            }
          } else {
            for (std::size_t j = 0; j < plane; ++j) q[j] += scale * d[j];
          }
        }
      }
    };
  });
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> y = x->value;
  for (auto& v : y.vec()) v = v > T(0) ? v : T(0);
  return tape.record(std::move(y), {x}, [=]() {
    return [=](const Tensor<T>& gy) {
      Tensor<T>& gx = x->grad_buffer();
      const T* p = x->value.data();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        if (p[i] > T(0)) gx[i] += gy[i];
      }
    };
  });
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (!(a->value.shape() == b->value.shape())) {
    throw ShapeError("add: " + a->value.shape().str() + " vs " + b->value.shape().str());
  }
  Tensor<T> y = a->value;
  add_into(y, b->value);
  return tape.record(std::move(y), {a, b}, [=]() {
    return [=](const Tensor<T>& gy) {
      a->accumulate(gy);
      b->accumulate(gy);
    };
  });
}

// Bilinear resize with half-pixel centers (no corner alignment). Used for the
// decoder's 2x upsampling; the target size may be an odd skip size.
struct BilinearTap {
  int i0, i1;
  double w1;
};

inline std::vector<BilinearTap> bilinear_taps(int in, int out) {
  std::vector<BilinearTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

template <typename T>
Var<T> upsample_bilinear(Tape<T>& tape, const Var<T>& x, int out_h, int out_w) {
  const Shape s = x->value.shape();
  const auto ty = bilinear_taps(s.h, out_h);
  const auto tx = bilinear_taps(s.w, out_w);
  Tensor<T> y({s.n, s.c, out_h, out_w});
  for (int i = 0; i < s.n; ++i) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = x->value.plane(i, c);
      T* q = y.plane(i, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const T wy = static_cast<T>(ty[oy].w1);
        const T* r0 = p + ty[oy].i0 * s.w;
        const T* r1 = p + ty[oy].i1 * s.w;
        for (int ox = 0; ox < out_w; ++ox) {
          const T wx = static_cast<T>(tx[ox].w1);
          const T top = r0[tx[ox].i0] * (1 - wx) + r0[tx[ox].i1] * wx;
          const T bot = r1[tx[ox].i0] * (1 - wx) + r1[tx[ox].i1] * wx;
          q[oy * out_w + ox] = top * (1 - wy) + bot * wy;
        }
      }
    }
  }
  return tape.record(std::move(y), {x}, [=]() {
    return [=](const Tensor<T>& gy) {
      Tensor<T>& gx = x->grad_buffer();
      for (int i = 0; i < s.n; ++i) {
        for (int c = 0; c < s.c; ++c) {
          const T* d = gy.plane(i, c);
          T* q = gx.plane(i, c);
          for (int oy = 0; oy < out_h; ++oy) {
            const T wy = static_cast<T>(ty[oy].w1);
            T* r0 = q + ty[oy].i0 * s.w;
            T* r1 = q + ty[oy].i1 * s.w;
            for (int ox = 0; ox < out_w; ++ox) {
              const T wx = static_cast<T>(tx[ox].w1);
              const T g = d[oy * out_w + ox];
              r0[tx[ox].i0] += g * (1 - wy) * (1 - wx);
              r0[tx[ox].i1] += g * (1 - wy) * wx;
              r1[tx[ox].i0] += g * wy * (1 - wx);
              r1[tx[ox].i1] += g * wy * wx;
            }
          }
        }
      }
    };
  });
}

// out channel j = in channel index[j]. Indices may repeat (broadcast).
template <typename T>
Var<T> gather_channels(Tape<T>& tape, const Var<T>& x, std::vector<int> index) {
  const Shape s = x->value.shape();
  for (int c : index) {
    if (c < 0 || c >= s.c) throw ShapeError("gather_channels: index out of range");
  }
  Tensor<T> y({s.n, static_cast<int>(index.size()), s.h, s.w});
  for (int i = 0; i < s.n; ++i) {
    for (std::size_t j = 0; j < index.size(); ++j) {
      std::copy_n(x->value.plane(i, index[j]), s.plane(), y.plane(i, static_cast<int>(j)));
    }
  }
  return tape.record(std::move(y), {x}, [=]() {
    return [=](const Tensor<T>& gy) {
      Tensor<T>& gx = x->grad_buffer();
      for (int i = 0; i < s.n; ++i) {
        for (std::size_t j = 0; j < index.size(); ++j) {
          const T* d = gy.plane(i, static_cast<int>(j));
          T* q = gx.plane(i, index[j]);
          for (std::size_t k = 0; k < s.plane(); ++k) q[k] += d[k];
        }
      }
    };
  });
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const Shape sa = a->value.shape();
  const Shape sb = b->value.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  Tensor<T> y({sa.n, sa.c + sb.c, sa.h, sa.w});
  for (int i = 0; i < sa.n; ++i) {
    std::copy_n(a->value.image(i), sa.c * sa.plane(), y.image(i));
    std::copy_n(b->value.image(i), sb.c * sb.plane(), y.plane(i, sa.c));
  }
  return tape.record(std::move(y), {a, b}, [=]() {
    return [=](const Tensor<T>& gy) {
      if (a->requires_grad) {
        Tensor<T>& ga = a->grad_buffer();
        for (int i = 0; i < sa.n; ++i) {
          const T* d = gy.image(i);
          T* q = ga.image(i);
          for (std::size_t k = 0; k < sa.c * sa.plane(); ++k) q[k] += d[k];
        }
      }
      if (b->requires_grad) {
        Tensor<T>& gb = b->grad_buffer();
        for (int i = 0; i < sb.n; ++i) {
          const T* d = gy.plane(i, sa.c);
          T* q = gb.image(i);
          for (std::size_t k = 0; k < sb.c * sb.plane(); ++k) q[k] += d[k];
        }
      }
    };
  });
}

// Max pooling; `ceil_mode` keeps a partial window at the border.
template <typename T>
Var<T> max_pool2d(Tape<T>& tape, const Var<T>& x, int kernel, int stride, int pad,
                  bool ceil_mode = false) {
  const Shape s = x->value.shape();
  auto out_size = [&](int in) {
    const int span = in + 2 * pad - kernel;
    int o = (ceil_mode ? (span + stride - 1) / stride : span / stride) + 1;
    if (ceil_mode && (o - 1) * stride >= in + pad) --o;
    return o;
  };
  const int oh = out_size(s.h);
  const int ow = out_size(s.w);
  Tensor<T> y({s.n, s.c, oh, ow});
  std::vector<int> argmax(y.size(), -1);
  for (int i = 0; i < s.n; ++i) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = x->value.plane(i, c);
      T* q = y.plane(i, c);
      int* am = argmax.data() + (q - y.data());
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          int best_i = -1;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= s.h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= s.w) continue;
              if (p[iy * s.w + ix] > best) {
                best = p[iy * s.w + ix];
                best_i = iy * s.w + ix;
              }
            }
          }
          q[oy * ow + ox] = best;
          am[oy * ow + ox] = best_i;
        }
      }
    }
  }
  return tape.record(std::move(y), {x}, [=, argmax = std::move(argmax)]() {
    return [=](const Tensor<T>& gy) {
      Tensor<T>& gx = x->grad_buffer();
      const std::size_t oplane = static_cast<std::size_t>(oh) * ow;
      for (int i = 0; i < s.n; ++i) {
        for (int c = 0; c < s.c; ++c) {
          const std::size_t base = (static_cast<std::size_t>(i) * s.c + c) * oplane;
          T* q = gx.plane(i, c);
          for (std::size_t j = 0; j < oplane; ++j) {
            if (argmax[base + j] >= 0) q[argmax[base + j]] += gy[base + j];
          }
        }
      }
    };
  });
}

// Cuts gradient flow; used when the offset path is detached from the APM.
template <typename T>
Var<T> detach(const Tape<T>& tape, const Var<T>& x) {
  return tape.constant(x->value);
}

}  // namespace promodet::nn
