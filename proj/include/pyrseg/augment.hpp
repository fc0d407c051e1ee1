#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "pyrseg/tensor.hpp"

namespace pyrseg {

struct AugmentParams {
  bool enabled = true;
  Index translation = 8;       // +- voxels, applied by shifting the patch center
  double rotation_deg = 15.0;  // +- degrees about the z axis
  Index elastic_grid = 4;      // control points per axis
  double elastic_sigma = 4.0;  // std of control-point offsets, voxels

  static AugmentParams none() { return {false, 0, 0.0, 4, 0.0}; }
  bool operator==(const AugmentParams&) const = default;
};

// A sampled deformation: rotation angle (radians) and elastic control offsets
// (grid^3 x 3, z/y/x components).
struct Deformation {
  double angle = 0.0;
  Index grid = 0;
  std::vector<double> offsets;

  bool is_identity() const {
    if (angle != 0.0) return false;
    for (double v : offsets)
      if (v != 0.0) return false;
    return true;
  }
};

template <typename Rng>
std::array<Index, 3> jitter_center(std::array<Index, 3> c, const AugmentParams& p, Rng& rng) {
  if (!p.enabled || p.translation <= 0) return c;
  std::uniform_int_distribution<Index> u(-p.translation, p.translation);
  for (auto& v : c) v += u(rng);
  return c;
}

template <typename Rng>
Deformation draw_deformation(const AugmentParams& p, Rng& rng) {
  Deformation d;
  if (!p.enabled) return d;
  if (p.rotation_deg > 0.0)
    d.angle = std::uniform_real_distribution<double>(-p.rotation_deg, p.rotation_deg)(rng) * std::numbers::pi / 180.0;
  if (p.elastic_sigma > 0.0 && p.elastic_grid >= 2) {
    d.grid = p.elastic_grid;
    d.offsets.resize(static_cast<std::size_t>(d.grid * d.grid * d.grid * 3));
    std::normal_distribution<double> g(0.0, p.elastic_sigma);
    for (auto& v : d.offsets) v = g(rng);
  }
  return d;
}

namespace detail {

// Linear interpolation of the elastic control grid at a physical offset r from the window
// center; the grid spans [-extent/2, extent/2] per axis.
struct GridTap {
  Index lo;
  double frac;
};

inline GridTap grid_tap(double r, double extent, Index grid) {
  const double g = std::clamp((r / extent + 0.5) * static_cast<double>(grid - 1), 0.0, static_cast<double>(grid - 1));
  const Index lo = std::min<Index>(static_cast<Index>(std::floor(g)), grid - 2);
  return {lo, g - static_cast<double>(lo)};
}

template <typename T>
T sample_trilinear(const Tensor5<T>& v, double z, double y, double x) {
  const Index z0 = static_cast<Index>(std::floor(z)), y0 = static_cast<Index>(std::floor(y)),
              x0 = static_cast<Index>(std::floor(x));
  const double fz = z - z0, fy = y - y0, fx = x - x0;
  double acc = 0.0;
  for (Index a = 0; a < 2; ++a) {
    const Index zz = z0 + a;
    const double wz = a ? fz : 1.0 - fz;
    if (wz == 0.0 || zz < 0 || zz >= v.d()) continue;
    for (Index b = 0; b < 2; ++b) {
      const Index yy = y0 + b;
      const double wy = b ? fy : 1.0 - fy;
      if (wy == 0.0 || yy < 0 || yy >= v.h()) continue;
      for (Index c = 0; c < 2; ++c) {
        const Index xx = x0 + c;
        const double wx = c ? fx : 1.0 - fx;
        if (wx == 0.0 || xx < 0 || xx >= v.w()) continue;
        acc += wz * wy * wx * static_cast<double>(v(0, 0, zz, yy, xx));
      }
    }
  }
  return static_cast<T>(acc);
}

template <typename T>
T sample_nearest(const Tensor5<T>& v, double z, double y, double x) {
  const Index zz = static_cast<Index>(std::floor(z + 0.5)), yy = static_cast<Index>(std::floor(y + 0.5)),
              xx = static_cast<Index>(std::floor(x + 0.5));
  if (zz < 0 || zz >= v.d() || yy < 0 || yy >= v.h() || xx < 0 || xx >= v.w()) return T(0);
  return v(0, 0, zz, yy, xx);
}

}  // namespace detail

// Resamples a P^3 patch of voxel spacing `spacing` out of a concentric (1, 1, E, E, E)
// source of the same spacing. `def` acts in original-resolution units about the common
// center: the output voxel at physical offset r reads the source at R_z(r + u(r)), where u
// is the elastic field over a window of physical extent `field_extent` (trilinear image,
// nearest labels, zero outside). The same `def` applied at every pyramid level keeps the
// levels aligned.
inline std::pair<Tensor5<float>, Tensor5<std::uint8_t>> deform_patch(const Tensor5<float>& image,
                                                                    const Tensor5<std::uint8_t>& labels, Index out_extent,
                                                                    double spacing, double field_extent,
                                                                    const Deformation& def) {
  const auto dims = image.shape().dhw();
  if (dims[0] != dims[1] || dims[1] != dims[2] || labels.shape().dhw() != dims || image.n() != 1 || image.c() != 1)
    throw ShapeError("augment: expected cubic single-channel windows of equal size");
  const Index E = dims[0];
  if (out_extent > E || (E - out_extent) % 2 != 0)
    throw ShapeError("augment: output extent must fit centrally inside the source window");
  const Index off = (E - out_extent) / 2;
  Tensor5<float> oi(Shape5{1, 1, out_extent, out_extent, out_extent});
  Tensor5<std::uint8_t> ol(oi.shape());
  if (def.is_identity()) {
    for (Index z = 0; z < out_extent; ++z)
      for (Index y = 0; y < out_extent; ++y)
        for (Index x = 0; x < out_extent; ++x) {
          oi(0, 0, z, y, x) = image(0, 0, z + off, y + off, x + off);
          ol(0, 0, z, y, x) = labels(0, 0, z + off, y + off, x + off);
        }
    return {std::move(oi), std::move(ol)};
  }
  const double cs = std::cos(def.angle), sn = std::sin(def.angle);
  const Index G = def.grid;
  const double half_out = static_cast<double>(out_extent) / 2.0, half_src = static_cast<double>(E) / 2.0;
  std::vector<double> r(static_cast<std::size_t>(out_extent));
  std::vector<detail::GridTap> taps;
  for (Index i = 0; i < out_extent; ++i) {
    r[i] = (static_cast<double>(i) + 0.5 - half_out) * spacing;
    if (G >= 2) taps.push_back(detail::grid_tap(r[i], field_extent, G));
  }
  auto offset_at = [&](Index gz, Index gy, Index gx, int comp) {
    return def.offsets[static_cast<std::size_t>(((gz * G + gy) * G + gx) * 3 + comp)];
  };
  for (Index z = 0; z < out_extent; ++z)
    for (Index y = 0; y < out_extent; ++y)
      for (Index x = 0; x < out_extent; ++x) {
        std::array<double, 3> u{0.0, 0.0, 0.0};
        if (G >= 2) {
          const auto tz = taps[z], ty = taps[y], tx = taps[x];
          for (int comp = 0; comp < 3; ++comp) {
            double acc = 0.0;
            for (Index a = 0; a < 2; ++a)
              for (Index b = 0; b < 2; ++b)
                for (Index e = 0; e < 2; ++e)
                  acc += (a ? tz.frac : 1 - tz.frac) * (b ? ty.frac : 1 - ty.frac) * (e ? tx.frac : 1 - tx.frac) *
                         offset_at(tz.lo + a, ty.lo + b, tx.lo + e, comp);
            u[comp] = acc;
          }
        }
        const double qz = r[z] + u[0], qy = r[y] + u[1], qx = r[x] + u[2];
        const double sz = qz, sy = cs * qy - sn * qx, sx = sn * qy + cs * qx;
        const double jz = sz / spacing + half_src - 0.5, jy = sy / spacing + half_src - 0.5,
                     jx = sx / spacing + half_src - 0.5;
        oi(0, 0, z, y, x) = detail::sample_trilinear(image, jz, jy, jx);
        ol(0, 0, z, y, x) = detail::sample_nearest(labels, jz, jy, jx);
      }
  return {std::move(oi), std::move(ol)};
}

// Full-resolution case: the central out_extent^3 region of a window.
inline std::pair<Tensor5<float>, Tensor5<std::uint8_t>> deform_window(const Tensor5<float>& image,
                                                                     const Tensor5<std::uint8_t>& labels,
                                                                     Index out_extent, const Deformation& def) {
  return deform_patch(image, labels, out_extent, 1.0, static_cast<double>(out_extent), def);
}

// Rotation + elastic deformation of a cubic patch pair (translation happens at extraction).
// Disabled parameters return the inputs unchanged.
template <typename Rng>
std::pair<Tensor5<float>, Tensor5<std::uint8_t>> augment_patch(const Tensor5<float>& image,
                                                               const Tensor5<std::uint8_t>& labels,
                                                               const AugmentParams& p, Rng& rng) {
  if (!p.enabled) return {image, labels};
  return deform_window(image, labels, image.d(), draw_deformation(p, rng));
}

// Source margin (same units as `extent`) so rotated/displaced samples stay inside it.
inline Index augment_margin(const AugmentParams& p, Index extent) {
  if (!p.enabled) return 0;
  const double half = static_cast<double>(extent) / 2.0;
  const double rot = half * (std::abs(std::sin(p.rotation_deg * std::numbers::pi / 180.0)) +
                             1.0 - std::cos(p.rotation_deg * std::numbers::pi / 180.0));
  const auto m = static_cast<Index>(std::ceil(rot + 3.0 * p.elastic_sigma)) + 1;
  return m;
}

}  // namespace pyrseg
