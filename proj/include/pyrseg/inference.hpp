#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pyrseg/activation.hpp"
#include "pyrseg/pyramid.hpp"
#include "pyrseg/resample.hpp"
#include "pyrseg/unet.hpp"
#include "pyrseg/volume.hpp"

namespace pyrseg {

// Tiling of one axis. Tiles are `tile` long and start at multiples of the network divisor;
// tile i keeps [keep[i].first, keep[i].second), which lies at least `margin` away from
// every tile edge that is not also an edge of the padded axis. Keep ranges are disjoint
// and cover [0, padded).
struct AxisTiling {
  Index padded = 0;
  Index tile = 0;
  std::vector<Index> starts;
  std::vector<std::pair<Index, Index>> keep;
};

inline AxisTiling plan_axis(Index length, Index tile, Index margin, Index divisor) {
  if (length < 1) throw ShapeError("tiled_inference: empty axis");
  if (tile < 1 || tile % divisor != 0)
    throw ConfigError("tiled_inference: tile " + std::to_string(tile) + " is not a positive multiple of " +
                      std::to_string(divisor));
  if (margin < 0 || 2 * margin >= tile)
    throw ConfigError("tiled_inference: margin " + std::to_string(margin) + " must satisfy 0 <= m < tile/2 = " +
                      std::to_string(tile / 2));
  AxisTiling t;
  t.padded = (length + divisor - 1) / divisor * divisor;
  if (t.padded <= tile) {
    t.tile = t.padded;
    t.starts = {0};
    t.keep = {{0, t.padded}};
    return t;
  }
  t.tile = tile;
  const Index stride = (tile - 2 * margin) / divisor * divisor;
  if (stride < 1)
    throw ConfigError("tiled_inference: tile " + std::to_string(tile) + " with margin " + std::to_string(margin) +
                      " leaves no stride at divisor " + std::to_string(divisor));
  for (Index a = 0;; a += stride) {
    if (a + tile >= t.padded) {
      t.starts.push_back(t.padded - tile);
      break;
    }
    t.starts.push_back(a);
  }
  for (std::size_t i = 0; i < t.starts.size(); ++i) {
    const Index lo = i == 0 ? 0 : t.keep.back().second;
    const Index hi = i + 1 == t.starts.size() ? t.padded : t.starts[i] + tile - margin;
    t.keep.push_back({lo, hi});
  }
  return t;
}

namespace detail {

template <typename T>
Tensor5<T> pad_high(const Tensor5<T>& x, const std::array<Index, 3>& dims) {
  if (x.shape().dhw() == dims) return x;
  Tensor5<T> out(Shape5{x.n(), x.c(), dims[0], dims[1], dims[2]});
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c)
      for (Index z = 0; z < x.d(); ++z)
        for (Index y = 0; y < x.h(); ++y)
          std::copy_n(&x(n, c, z, y, 0), x.w(), &out(n, c, z, y, 0));
  return out;
}

template <typename T>
Tensor5<T> crop_low(const Tensor5<T>& x, const std::array<Index, 3>& dims) {
  if (x.shape().dhw() == dims) return x;
  Tensor5<T> out(Shape5{x.n(), x.c(), dims[0], dims[1], dims[2]});
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c)
      for (Index z = 0; z < dims[0]; ++z)
        for (Index y = 0; y < dims[1]; ++y) std::copy_n(&x(n, c, z, y, 0), dims[2], &out(n, c, z, y, 0));
  return out;
}

}  // namespace detail

// Softmax map (1, K, D, H, W) of a network over a whole (1, C, D, H, W) volume assembled from
// overlapping tiles. The volume is zero-padded on the high side to a multiple of the network
// divisor; axes no longer than `tile` after padding are covered by a single tile. Equals the
// single-pass forward on the padded volume whenever margin >= receptive_field_radius.
template <typename T>
Tensor5<T> tiled_inference(const Network<T>& net, const Tensor5<T>& volume, Index tile, Index margin) {
  if (volume.n() != 1) throw ShapeError("tiled_inference: expected a single volume (N = 1)");
  const Index div = net.config().divisor();
  const auto dims = volume.shape().dhw();
  std::array<AxisTiling, 3> ax;
  std::array<Index, 3> padded{};
  for (int a = 0; a < 3; ++a) {
    ax[a] = plan_axis(dims[a], tile, margin, div);
    padded[a] = ax[a].padded;
  }
  const auto src = detail::pad_high(volume, padded);
  const Index K = net.config().num_classes, C = volume.c();
  Tensor5<T> out(Shape5{1, K, padded[0], padded[1], padded[2]});
  const std::array<Index, 3> te{ax[0].tile, ax[1].tile, ax[2].tile};
  for (std::size_t iz = 0; iz < ax[0].starts.size(); ++iz)
    for (std::size_t iy = 0; iy < ax[1].starts.size(); ++iy)
      for (std::size_t ix = 0; ix < ax[2].starts.size(); ++ix) {
        const std::array<Index, 3> a0{ax[0].starts[iz], ax[1].starts[iy], ax[2].starts[ix]};
        Tensor5<T> t(Shape5{1, C, te[0], te[1], te[2]});
        for (Index c = 0; c < C; ++c)
          for (Index z = 0; z < te[0]; ++z)
            for (Index y = 0; y < te[1]; ++y)
              std::copy_n(&src(0, c, a0[0] + z, a0[1] + y, a0[2]), te[2], &t(0, c, z, y, 0));
        const auto p = softmax_channels(unet_forward(net, t));
        const auto kz = ax[0].keep[iz], ky = ax[1].keep[iy], kx = ax[2].keep[ix];
        for (Index k = 0; k < K; ++k)
          for (Index z = kz.first; z < kz.second; ++z)
            for (Index y = ky.first; y < ky.second; ++y)
              std::copy_n(&p(0, k, z - a0[0], y - a0[1], kx.first - a0[2]), kx.second - kx.first, &out(0, k, z, y, kx.first));
      }
  return detail::crop_low(out, dims);
}

// Nearest upsampling of a label volume by an integer factor.
inline Tensor5<std::uint8_t> upsample_labels(const Tensor5<std::uint8_t>& x, Index f) {
  if (f == 1) return x;
  Tensor5<std::uint8_t> out(Shape5{x.n(), x.c(), x.d() * f, x.h() * f, x.w() * f});
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c)
      for (Index z = 0; z < out.d(); ++z)
        for (Index y = 0; y < out.h(); ++y)
          for (Index xx = 0; xx < out.w(); ++xx) out(n, c, z, y, xx) = x(n, c, z / f, y / f, xx / f);
  return out;
}

template <typename T>
Tensor5<std::uint8_t> argmax_labels(const Tensor5<T>& p) {
  const auto a = argmax_channels(p);
  Tensor5<std::uint8_t> out(a.shape());
  for (Index i = 0; i < a.size(); ++i) out[i] = static_cast<std::uint8_t>(a[i]);
  return out;
}

// Whole-volume pyramid evaluation of a (1, 1, D, H, W) image. Levels above `up_to_level`
// are skipped (a level-1-only model predicts from level 1). Without auto-context only the
// last used level runs. Returns labels at the input resolution.
template <typename T>
Tensor5<std::uint8_t> pyramid_inference(const PyramidModel<T>& model, const Tensor5<T>& image, Index tile, Index margin,
                                        int up_to_level = -1) {
  const auto& cfg = model.config;
  if (image.n() != 1 || image.c() != 1) throw ShapeError("pyramid_inference: expected a (1, 1, D, H, W) image");
  const int S = up_to_level < 0 ? cfg.levels : up_to_level;
  if (S < 1 || S > cfg.levels) throw ConfigError("pyramid_inference: up_to_level out of range");
  const auto ds = cfg.factors();
  const auto dims = image.shape().dhw();
  std::array<Index, 3> padded{};
  for (int a = 0; a < 3; ++a) padded[a] = (dims[a] + ds[0] - 1) / ds[0] * ds[0];
  const auto full = detail::pad_high(image, padded);
  Tensor5<T> soft;
  const int first = cfg.context == ContextMode::none ? S - 1 : 0;
  for (int s = first; s < S; ++s) {
    const auto si = static_cast<std::size_t>(s);
    auto img = downsample(full, ds[si], DownsampleMode::trilinear);
    if (s > first) {
      const Interp interp = cfg.context == ContextMode::label_channel ? Interp::nearest : Interp::trilinear;
      img = concat_channels(img, upsample2x(context_from_softmax(soft, cfg.context), interp));
    }
    soft = tiled_inference(model.nets[si], img, tile, margin);
  }
  const auto labels = upsample_labels(argmax_labels(soft), ds[static_cast<std::size_t>(S - 1)]);
  return detail::crop_low(labels, dims);
}

template <typename T>
VolumeFile pyramid_inference(const PyramidModel<T>& model, const VolumeFile& image, Index tile, Index margin,
                             int up_to_level = -1) {
  auto labels = pyramid_inference(model, image_tensor(image).template cast<T>(), tile, margin, up_to_level);
  return VolumeFile::labels(image.dims, std::move(labels).vec(), image.spacing);
}

}  // namespace pyrseg
