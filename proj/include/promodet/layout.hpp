#pragma once

#include <vector>

#include "promodet/anchors.hpp"
#include "promodet/nn/tensor.hpp"

namespace promodet {

// Head maps store `per_anchor` channels for each of the A anchors of a
// location, anchor-major: channel a * per_anchor + j. These helpers move
// values between a level map of image `i` and the flat anchor order used by
// AnchorSet, where index = offset + (y * W + x) * A + a.

template <typename T>
void gather_anchor_values(const nn::Tensor<T>& map, int image, int anchors, int per_anchor,
                          double* out) {
  const int hw = map.h() * map.w();
  if (map.c() != anchors * per_anchor) {
    throw ShapeError("head map has " + std::to_string(map.c()) + " channels, expected " +
                     std::to_string(anchors * per_anchor));
  }
  for (int a = 0; a < anchors; ++a) {
    for (int j = 0; j < per_anchor; ++j) {
      const T* p = map.plane(image, a * per_anchor + j);
      for (int q = 0; q < hw; ++q) {
        out[(static_cast<std::size_t>(q) * anchors + a) * per_anchor + j] =
            static_cast<double>(p[q]);
      }
    }
  }
}

template <typename T>
void scatter_anchor_values(nn::Tensor<T>& map, int image, int anchors, int per_anchor,
                           const double* in) {
  const int hw = map.h() * map.w();
  for (int a = 0; a < anchors; ++a) {
    for (int j = 0; j < per_anchor; ++j) {
      T* p = map.plane(image, a * per_anchor + j);
      for (int q = 0; q < hw; ++q) {
        p[q] += static_cast<T>(in[(static_cast<std::size_t>(q) * anchors + a) * per_anchor + j]);
      }
    }
  }
}

// Flattens per-level maps of one image into anchor order, `per_anchor`
// values per anchor.
template <typename T, typename VarLike>
std::vector<double> flatten_levels(const std::vector<VarLike>& maps, const AnchorSet& anchors,
                                   int image, int per_anchor) {
  std::vector<double> out(anchors.size() * per_anchor);
  for (int l = 0; l < anchors.num_levels(); ++l) {
    gather_anchor_values<T>(maps[l]->value, image, anchors.per_location[l], per_anchor,
                            out.data() + static_cast<std::size_t>(anchors.level_offset[l]) *
                                             per_anchor);
  }
  return out;
}

}  // namespace promodet
