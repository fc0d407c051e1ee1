#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "pyrseg/volume.hpp"

namespace pyrseg {

enum class ShapeFamily { ellipsoid, sphere, box, tube };

// One foreground class. Coordinates are voxel units (z, y, x).
//   ellipsoid/box: `center`, semi-axes / half-extents in `radii`
//   sphere:        `center`, radius radii[0]
//   tube:          centerline y(z) = center[1] + amplitude[0] sin(phase + 2 pi (z - z0) / period),
//                  x(z) = center[2] + amplitude[1] cos(...), z in [z_range[0], z_range[1]]; radius radii[0]
struct StructureSpec {
  int label = 1;
  ShapeFamily shape = ShapeFamily::ellipsoid;
  double intensity = 0.5;
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  std::array<double, 2> z_range{};
  std::array<double, 2> amplitude{};
  double period = 1.0;
  double phase = 0.0;
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  std::array<std::uint64_t, 3> dims{128, 128, 128};
  int num_classes = 8;
  std::vector<StructureSpec> structures;  // painted in order; later ones take priority
  bool body = true;                       // background-labelled body ellipsoid
  double air_intensity = 0.0;
  double body_intensity = 0.3;
  double noise_sigma = 0.05;
};

inline const std::vector<std::string>& phantom_class_names() {
  static const std::vector<std::string> names{"background", "liver",   "artery",   "spleen",
                                              "bone",       "stomach", "pancreas", "vein"};
  return names;
}

inline std::vector<std::string> class_names(int K) {
  std::vector<std::string> out;
  for (int k = 0; k < K; ++k)
    out.push_back(k < static_cast<int>(phantom_class_names().size()) ? phantom_class_names()[k]
                                                                      : "class" + std::to_string(k));
  return out;
}

// Labels of thin tubular classes in the default layout.
inline std::vector<int> thin_tube_classes(int K) {
  std::vector<int> out;
  for (int k : {2, 7})
    if (k < K) out.push_back(k);
  return out;
}

// Abdomen-like layout: liver left, spleen right with identical intensity (so location and
// context disambiguate them), a curved artery, a spine-like box, then stomach, pancreas and a
// vein for K = 8. Positions and sizes are jittered by the seed.
inline PhantomSpec default_phantom_spec(std::uint64_t seed, std::array<std::uint64_t, 3> dims, int K) {
  if (K < 1 || K > 8) throw ConfigError("phantom: default layout supports 1..8 classes, got " + std::to_string(K));
  PhantomSpec spec;
  spec.seed = seed;
  spec.dims = dims;
  spec.num_classes = K;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double D = static_cast<double>(dims[0]), H = static_cast<double>(dims[1]), W = static_cast<double>(dims[2]);
  auto at = [&](double fz, double fy, double fx) {
    return std::array<double, 3>{D * (fz + 0.03 * u(rng)), H * (fy + 0.03 * u(rng)), W * (fx + 0.03 * u(rng))};
  };
  auto size = [&](double fz, double fy, double fx) {
    const double s = 1.0 + 0.1 * u(rng);
    return std::array<double, 3>{D * fz * s, H * fy * s, W * fx * s};
  };
  auto tube = [&](int label, double intensity, double fy, double fx, double sign) {
    StructureSpec t{label, ShapeFamily::tube, intensity};
    t.center = at(0.5, fy, fx);
    t.radii = {2.0, 0.0, 0.0};
    t.z_range = {D * 0.08, D * 0.92};
    t.amplitude = {H * 0.04 * (1.0 + 0.2 * u(rng)), sign * W * 0.05 * (1.0 + 0.2 * u(rng))};
    t.period = D * (0.8 + 0.1 * u(rng));
    t.phase = std::numbers::pi * u(rng);
    return t;
  };
  std::vector<StructureSpec> all;
  if (K > 1) all.push_back({1, ShapeFamily::ellipsoid, 0.6, at(0.5, 0.48, 0.29), size(0.24, 0.17, 0.13)});
  if (K > 3) all.push_back({3, ShapeFamily::ellipsoid, 0.6, at(0.5, 0.48, 0.71), size(0.17, 0.12, 0.09)});
  if (K > 4) all.push_back({4, ShapeFamily::box, 0.9, at(0.5, 0.64, 0.5), size(0.42, 0.05, 0.05)});
  if (K > 5) {
    StructureSpec s{5, ShapeFamily::sphere, 0.45, at(0.42, 0.36, 0.58), {}};
    s.radii = {std::min({D, H, W}) * 0.08 * (1.0 + 0.1 * u(rng)), 0.0, 0.0};
    all.push_back(s);
  }
  if (K > 6) all.push_back({6, ShapeFamily::ellipsoid, 0.5, at(0.6, 0.46, 0.5), size(0.05, 0.04, 0.12)});
  if (K > 2) all.push_back(tube(2, 0.75, 0.40, 0.53, 1.0));
  if (K > 7) all.push_back(tube(7, 0.7, 0.44, 0.43, -1.0));
  spec.structures = std::move(all);
  return spec;
}

namespace detail {

inline std::array<double, 3> tube_point(const StructureSpec& s, double z) {
  const double a = s.phase + 2.0 * std::numbers::pi * (z - s.z_range[0]) / s.period;
  return {z, s.center[1] + s.amplitude[0] * std::sin(a), s.center[2] + s.amplitude[1] * std::cos(a)};
}

inline std::vector<std::array<double, 3>> tube_samples(const StructureSpec& s) {
  std::vector<std::array<double, 3>> pts;
  const double len = s.z_range[1] - s.z_range[0];
  const auto n = static_cast<std::size_t>(std::ceil(len / 0.25)) + 1;
  for (std::size_t i = 0; i < n; ++i)
    pts.push_back(tube_point(s, s.z_range[0] + len * static_cast<double>(i) / static_cast<double>(n - 1)));
  return pts;
}

}  // namespace detail

// Arc length of a tube centerline.
inline double tube_centerline_length(const StructureSpec& s) {
  const auto pts = detail::tube_samples(s);
  double len = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    len += std::hypot(pts[i][0] - pts[i - 1][0], pts[i][1] - pts[i - 1][1], pts[i][2] - pts[i - 1][2]);
  return len;
}

struct Phantom {
  VolumeFile image;
  VolumeFile labels;
};

inline Phantom generate_phantom(const PhantomSpec& spec) {
  const auto [D, H, W] = std::array<Index, 3>{static_cast<Index>(spec.dims[0]), static_cast<Index>(spec.dims[1]),
                                              static_cast<Index>(spec.dims[2])};
  if (D < 1 || H < 1 || W < 1) throw ConfigError("phantom: dims must be positive");
  if (spec.num_classes < 1 || spec.num_classes > 255) throw ConfigError("phantom: num_classes must be in [1, 255]");
  const auto N = static_cast<std::size_t>(D * H * W);
  std::vector<std::uint8_t> lab(N, 0);
  std::vector<float> mean(N, static_cast<float>(spec.air_intensity));
  auto idx = [&](Index z, Index y, Index x) { return static_cast<std::size_t>((z * H + y) * W + x); };
  auto clampi = [](double v, Index hi) { return std::clamp<Index>(static_cast<Index>(std::floor(v)), 0, hi - 1); };

  if (spec.body) {
    const std::array<double, 3> c{(D - 1) / 2.0, (H - 1) / 2.0, (W - 1) / 2.0},
        r{0.46 * static_cast<double>(D), 0.36 * static_cast<double>(H), 0.44 * static_cast<double>(W)};
    for (Index z = 0; z < D; ++z)
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
          const double a = (z - c[0]) / r[0], b = (y - c[1]) / r[1], e = (x - c[2]) / r[2];
          if (a * a + b * b + e * e <= 1.0) mean[idx(z, y, x)] = static_cast<float>(spec.body_intensity);
        }
  }

  for (const auto& s : spec.structures) {
    if (s.label < 1 || s.label >= spec.num_classes)
      throw ConfigError("phantom: structure label " + std::to_string(s.label) + " outside [1, " +
                        std::to_string(spec.num_classes) + ")");
    std::size_t painted = 0;
    auto paint = [&](Index z, Index y, Index x) {
      const auto i = idx(z, y, x);
      lab[i] = static_cast<std::uint8_t>(s.label);
      mean[i] = static_cast<float>(s.intensity);
      ++painted;
    };
    if (s.shape == ShapeFamily::tube) {
      const double r = s.radii[0];
      for (const auto& p : detail::tube_samples(s))
        for (Index z = clampi(p[0] - r, D); z <= clampi(p[0] + r + 1, D); ++z)
          for (Index y = clampi(p[1] - r, H); y <= clampi(p[1] + r + 1, H); ++y)
            for (Index x = clampi(p[2] - r, W); x <= clampi(p[2] + r + 1, W); ++x) {
              const double dz = z - p[0], dy = y - p[1], dx = x - p[2];
              if (dz * dz + dy * dy + dx * dx <= r * r) paint(z, y, x);
            }
    } else {
      const std::array<double, 3> r =
          s.shape == ShapeFamily::sphere ? std::array<double, 3>{s.radii[0], s.radii[0], s.radii[0]} : s.radii;
      for (Index z = clampi(s.center[0] - r[0], D); z <= clampi(s.center[0] + r[0] + 1, D); ++z)
        for (Index y = clampi(s.center[1] - r[1], H); y <= clampi(s.center[1] + r[1] + 1, H); ++y)
          for (Index x = clampi(s.center[2] - r[2], W); x <= clampi(s.center[2] + r[2] + 1, W); ++x) {
            const double a = (z - s.center[0]) / r[0], b = (y - s.center[1]) / r[1], e = (x - s.center[2]) / r[2];
            const bool inside = s.shape == ShapeFamily::box ? std::abs(a) <= 1.0 && std::abs(b) <= 1.0 && std::abs(e) <= 1.0
                                                            : a * a + b * b + e * e <= 1.0;
            if (inside) paint(z, y, x);
          }
    }
    if (painted == 0)
      throw ConfigError("phantom: structure of class " + std::to_string(s.label) + " does not fit in dims " +
                        std::to_string(D) + "x" + std::to_string(H) + "x" + std::to_string(W));
  }

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  std::vector<float> img(N);
  for (std::size_t i = 0; i < N; ++i)
    img[i] = static_cast<float>(std::clamp(static_cast<double>(mean[i]) + noise(rng), 0.0, 1.0));

  return {VolumeFile::image(spec.dims, std::move(img)), VolumeFile::labels(spec.dims, std::move(lab))};
}

}  // namespace pyrseg
