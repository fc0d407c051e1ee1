#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "pyrseg/tensor.hpp"

namespace pyrseg {

enum class Interp { trilinear, nearest };
enum class DownsampleMode { trilinear, nearest, label_majority };

// Channel concatenation, `a` first.
template <typename T>
Tensor5<T> concat_channels(const Tensor5<T>& a, const Tensor5<T>& b) {
  const auto &sa = a.shape(), &sb = b.shape();
  if (sa.n != sb.n || sa.d != sb.d || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels: incompatible shapes " + sa.str() + " and " + sb.str());
  Tensor5<T> out(Shape5{sa.n, sa.c + sb.c, sa.d, sa.h, sa.w});
  for (Index n = 0; n < sa.n; ++n) {
    auto dst = out.item(n);
    auto ia = a.item(n);
    auto ib = b.item(n);
    std::copy(ia.begin(), ia.end(), dst.begin());
    std::copy(ib.begin(), ib.end(), dst.begin() + static_cast<std::ptrdiff_t>(ia.size()));
  }
  return out;
}

// Channels [first, first + count) of x.
template <typename T>
Tensor5<T> slice_channels(const Tensor5<T>& x, Index first, Index count) {
  if (first < 0 || count < 0 || first + count > x.c())
    throw ShapeError("slice_channels: range [" + std::to_string(first) + "," + std::to_string(first + count) +
                     ") outside " + std::to_string(x.c()) + " channels");
  Tensor5<T> out(Shape5{x.n(), count, x.d(), x.h(), x.w()});
  const Index S = x.shape().spatial();
  for (Index n = 0; n < x.n(); ++n) {
    auto src = x.item(n).subspan(static_cast<std::size_t>(first * S), static_cast<std::size_t>(count * S));
    std::copy(src.begin(), src.end(), out.item(n).begin());
  }
  return out;
}

// Cotangent of concat_channels split back into the (a, b) channel ranges.
template <typename T>
std::pair<Tensor5<T>, Tensor5<T>> concat_channels_backward(const Tensor5<T>& dy, Index channels_a) {
  return {slice_channels(dy, 0, channels_a), slice_channels(dy, channels_a, dy.c() - channels_a)};
}

inline std::array<Index, 3> crop_offsets(const std::array<Index, 3>& src, const std::array<Index, 3>& tgt) {
  std::array<Index, 3> off{};
  for (int a = 0; a < 3; ++a) {
    if (tgt[a] > src[a] || tgt[a] < 0)
      throw ShapeError("center_crop: target " + std::to_string(tgt[a]) + " larger than source " +
                       std::to_string(src[a]) + " on axis " + std::to_string(a));
    off[a] = (src[a] - tgt[a]) / 2;
  }
  return off;
}

// Central window of size target; start = floor((src - tgt) / 2) per axis.
template <typename T>
Tensor5<T> center_crop(const Tensor5<T>& x, const std::array<Index, 3>& target) {
  const auto off = crop_offsets(x.shape().dhw(), target);
  Tensor5<T> out(Shape5{x.n(), x.c(), target[0], target[1], target[2]});
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c)
      for (Index z = 0; z < target[0]; ++z)
        for (Index y = 0; y < target[1]; ++y) {
          const T* src = &x(n, c, z + off[0], y + off[1], off[2]);
          std::copy(src, src + target[2], &out(n, c, z, y, 0));
        }
  return out;
}

template <typename T>
Tensor5<T> center_crop_backward(const Tensor5<T>& dy, const Shape5& input_shape) {
  const auto off = crop_offsets(input_shape.dhw(), dy.shape().dhw());
  Tensor5<T> dx(input_shape);
  for (Index n = 0; n < dy.n(); ++n)
    for (Index c = 0; c < dy.c(); ++c)
      for (Index z = 0; z < dy.d(); ++z)
        for (Index y = 0; y < dy.h(); ++y) {
          const T* src = &dy(n, c, z, y, 0);
          std::copy(src, src + dy.w(), &dx(n, c, z + off[0], y + off[1], off[2]));
        }
  return dx;
}

namespace detail {

// View of a tensor as (outer, len, inner) around one spatial axis (0 = depth, 1 = height, 2 = width).
struct AxisView {
  Index outer, len, inner;
};

inline AxisView axis_view(const Shape5& s, int axis) {
  switch (axis) {
    case 0: return {s.n * s.c, s.d, s.h * s.w};
    case 1: return {s.n * s.c * s.d, s.h, s.w};
    default: return {s.n * s.c * s.d * s.h, s.w, 1};
  }
}

inline Shape5 scale_axis(Shape5 s, int axis, Index num, Index den) {
  Index* dims[3] = {&s.d, &s.h, &s.w};
  *dims[axis] = *dims[axis] * num / den;
  return s;
}

// Output index o of a doubled axis samples source coordinate (o + 0.5) / 2 - 0.5, clamped
// to the valid range: two taps with weights 0.75 (near) and 0.25 (far).
struct LinearTaps {
  Index near_idx, far_idx;
};

inline LinearTaps doubling_taps(Index o, Index len) {
  const Index i = o / 2;
  const Index far = (o % 2 == 0) ? std::max<Index>(i - 1, 0) : std::min<Index>(i + 1, len - 1);
  return {i, far};
}

template <typename T>
Tensor5<T> upsample_axis(const Tensor5<T>& x, int axis, Interp mode) {
  const auto v = axis_view(x.shape(), axis);
  Tensor5<T> y(scale_axis(x.shape(), axis, 2, 1));
  for (Index o = 0; o < v.outer; ++o) {
    const T* src = x.data() + o * v.len * v.inner;
    T* dst = y.data() + o * 2 * v.len * v.inner;
    for (Index j = 0; j < 2 * v.len; ++j) {
      T* out = dst + j * v.inner;
      if (mode == Interp::nearest) {
        const T* s = src + (j / 2) * v.inner;
        std::copy(s, s + v.inner, out);
      } else {
        const auto t = doubling_taps(j, v.len);
        const T* a = src + t.near_idx * v.inner;
        const T* b = src + t.far_idx * v.inner;
        for (Index k = 0; k < v.inner; ++k) out[k] = T(0.75) * a[k] + T(0.25) * b[k];
      }
    }
  }
  return y;
}

template <typename T>
Tensor5<T> upsample_axis_backward(const Tensor5<T>& dy, int axis, Interp mode) {
  Tensor5<T> dx(scale_axis(dy.shape(), axis, 1, 2));
  const auto v = axis_view(dx.shape(), axis);
  for (Index o = 0; o < v.outer; ++o) {
    const T* src = dy.data() + o * 2 * v.len * v.inner;
    T* dst = dx.data() + o * v.len * v.inner;
    for (Index j = 0; j < 2 * v.len; ++j) {
      const T* g = src + j * v.inner;
      if (mode == Interp::nearest) {
        T* d = dst + (j / 2) * v.inner;
        for (Index k = 0; k < v.inner; ++k) d[k] += g[k];
      } else {
        const auto t = doubling_taps(j, v.len);
        T* a = dst + t.near_idx * v.inner;
        T* b = dst + t.far_idx * v.inner;
        for (Index k = 0; k < v.inner; ++k) {
          a[k] += T(0.75) * g[k];
          b[k] += T(0.25) * g[k];
        }
      }
    }
  }
  return dx;
}

}  // namespace detail

// Doubles every spatial dim. Trilinear uses the align-corners-false convention with
// edge clamping; nearest replicates each voxel into a 2x2x2 block.
template <typename T>
Tensor5<T> upsample2x(const Tensor5<T>& x, Interp mode) {
  return detail::upsample_axis(detail::upsample_axis(detail::upsample_axis(x, 0, mode), 1, mode), 2, mode);
}

// Adjoint of upsample2x (it is linear in its input).
template <typename T>
Tensor5<T> upsample2x_backward(const Tensor5<T>& dy, Interp mode) {
  for (Index dim : dy.shape().dhw())
    if (dim % 2 != 0) throw ShapeError("upsample2x_backward: odd cotangent dim " + std::to_string(dim));
  return detail::upsample_axis_backward(
      detail::upsample_axis_backward(detail::upsample_axis_backward(dy, 2, mode), 1, mode), 0, mode);
}

// Most frequent value in a block. A tie between background (0) and a foreground label
// goes to the foreground label, so thin structures survive coarsening; among tied
// foreground labels the smallest wins.
template <typename T>
T block_mode(std::vector<T>& values) {
  std::sort(values.begin(), values.end());
  T best = values.front();
  std::size_t best_count = 0;
  for (std::size_t i = 0; i < values.size();) {
    std::size_t j = i;
    while (j < values.size() && values[j] == values[i]) ++j;
    if (j - i > best_count || (j - i == best_count && best == T(0))) {
      best_count = j - i;
      best = values[i];
    }
    i = j;
  }
  return best;
}

// Divides every spatial dim by `factor`. trilinear = box-filter average over each
// factor^3 block (the anti-aliased sample at the block center); nearest = block origin;
// label_majority = modal label of the block.
template <typename T>
Tensor5<T> downsample(const Tensor5<T>& x, Index factor, DownsampleMode mode) {
  if (factor < 1) throw ConfigError("downsample: factor must be >= 1, got " + std::to_string(factor));
  const auto& s = x.shape();
  for (Index dim : s.dhw())
    if (dim % factor != 0)
      throw ShapeError("downsample: dim " + std::to_string(dim) + " not divisible by factor " + std::to_string(factor));
  if (factor == 1) return x;
  const Index f = factor;
  Tensor5<T> y(Shape5{s.n, s.c, s.d / f, s.h / f, s.w / f});
  std::vector<T> block(static_cast<std::size_t>(f * f * f));
  const double inv = 1.0 / static_cast<double>(f * f * f);
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index z = 0; z < y.d(); ++z)
        for (Index yy = 0; yy < y.h(); ++yy)
          for (Index xx = 0; xx < y.w(); ++xx) {
            T& out = y(n, c, z, yy, xx);
            if (mode == DownsampleMode::nearest) {
              out = x(n, c, z * f, yy * f, xx * f);
              continue;
            }
            std::size_t i = 0;
            for (Index dz = 0; dz < f; ++dz)
              for (Index dy = 0; dy < f; ++dy) {
                const T* row = &x(n, c, z * f + dz, yy * f + dy, xx * f);
                for (Index dx = 0; dx < f; ++dx) block[i++] = row[dx];
              }
            if (mode == DownsampleMode::label_majority) {
              out = block_mode(block);
            } else {
              double sum = 0.0;
              for (T v : block) sum += static_cast<double>(v);
              out = static_cast<T>(sum * inv);
            }
          }
  return y;
}

}  // namespace pyrseg
