#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pyrseg/activation.hpp"
#include "pyrseg/batchnorm.hpp"
#include "pyrseg/conv.hpp"
#include "pyrseg/loss.hpp"
#include "pyrseg/pool.hpp"
#include "pyrseg/pyramid.hpp"
#include "pyrseg/resample.hpp"
#include "pyrseg/unet.hpp"

// Finite-difference verification of every hand-written gradient, in double precision.
namespace pyrseg::gradcheck {

// ||a - b||_2 / max(||a||_2, ||b||_2); zero when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::sqrt(std::max(na, nb));
  return den == 0.0 ? 0.0 : std::sqrt(num) / den;
}

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h at the given coordinates of `x`.
// `x` is perturbed in place and restored.
inline std::vector<double> central_differences(const std::function<double()>& f, std::span<double> x,
                                               std::span<const std::size_t> coords, double h) {
  std::vector<double> out;
  out.reserve(coords.size());
  for (std::size_t i : coords) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f();
    x[i] = saved - h;
    const double down = f();
    x[i] = saved;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

inline std::vector<std::size_t> all_coords(std::size_t n) {
  std::vector<std::size_t> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = i;
  return c;
}

// Up to `k` distinct coordinates out of n, sorted.
inline std::vector<std::size_t> sample_coords(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  auto c = all_coords(n);
  if (n <= k) return c;
  std::shuffle(c.begin(), c.end(), rng);
  c.resize(k);
  std::sort(c.begin(), c.end());
  return c;
}

inline std::vector<double> gather(std::span<const double> v, std::span<const std::size_t> coords) {
  std::vector<double> out;
  for (std::size_t i : coords) out.push_back(v[i]);
  return out;
}

struct CheckResult {
  std::string op;
  std::uint64_t seed = 0;
  double rel_err = 0.0;
  double tol = 0.0;
  int kinks = 0;  // sampled coordinates dropped because x +- h straddles a ReLU/max-pool kink
  bool usable = true;
  bool pass() const { return usable && rel_err <= tol; }
};

struct SuiteOptions {
  std::uint64_t seed = 1;
  int seeds = 20;
  double tol = 1e-5;            // single ops
  double composite_tol = 1e-4;  // whole-network composites
  double step = 1e-5;
  // Flips the sign of the analytic gradient of the named op (mutation testing of the suite).
  std::string inject_sign_error;
};

namespace detail {

using Rng = std::mt19937_64;

inline Index uniform_int(Rng& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

inline Tensor5<double> random_tensor(Shape5 s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor5<double> t(s);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& x : v) x = u(rng);
  return v;
}

// Random values at least `margin` away from zero.
inline Tensor5<double> away_from_zero(Shape5 s, Rng& rng, double margin) {
  Tensor5<double> t(s);
  std::uniform_real_distribution<double> u(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.vec()) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

inline void append(std::vector<double>& dst, std::span<const double> src) { dst.insert(dst.end(), src.begin(), src.end()); }

inline CheckResult finish(const std::string& op, const SuiteOptions& o, std::uint64_t seed, std::vector<double> analytic,
                          const std::vector<double>& numeric, double tol) {
  if (o.inject_sign_error == op)
    for (auto& v : analytic) v = -v;
  return {op, seed, relative_error(analytic, numeric), tol};
}

inline CheckResult check_conv3d(const SuiteOptions& o, std::uint64_t seed) {
  Rng rng(seed);
  const Index cin = uniform_int(rng, 1, 3), cout = uniform_int(rng, 1, 3);
  auto x = random_tensor({uniform_int(rng, 1, 2), cin, uniform_int(rng, 2, 6), uniform_int(rng, 2, 6), uniform_int(rng, 2, 6)}, rng);
  auto w = random_vector(static_cast<std::size_t>(cout * cin * 27), rng);
  auto b = random_vector(static_cast<std::size_t>(cout), rng);
  auto kern = [&] { return ConvKernel<double>{cout, cin, 3, w, b}; };
  auto r = random_tensor({x.n(), cout, x.d(), x.h(), x.w()}, rng);
  auto f = [&] { return dot(conv3d(x, kern()), r); };
  std::vector<double> dw(w.size()), db(b.size());
  auto dx = conv3d_backward(x, kern(), r, ConvGrads<double>{dw, db});
  std::vector<double> analytic, numeric;
  append(analytic, dx.vec());
  append(analytic, dw);
  append(analytic, db);
  append(numeric, central_differences(f, x.vec(), all_coords(x.vec().size()), o.step));
  append(numeric, central_differences(f, w, all_coords(w.size()), o.step));
  append(numeric, central_differences(f, b, all_coords(b.size()), o.step));
  return finish("conv3d", o, seed, std::move(analytic), numeric, o.tol);
}

inline CheckResult check_conv_transpose3d(const SuiteOptions& o, std::uint64_t seed) {
  Rng rng(seed);
  const Index cin = uniform_int(rng, 1, 3), cout = uniform_int(rng, 1, 3);
  auto x = random_tensor({uniform_int(rng, 1, 2), cin, uniform_int(rng, 1, 3), uniform_int(rng, 1, 3), uniform_int(rng, 1, 3)}, rng);
  auto w = random_vector(static_cast<std::size_t>(cout * cin * 8), rng);
  auto b = random_vector(static_cast<std::size_t>(cout), rng);
  auto kern = [&] { return ConvKernel<double>{cout, cin, 2, w, b}; };
  auto r = random_tensor({x.n(), cout, 2 * x.d(), 2 * x.h(), 2 * x.w()}, rng);
  auto f = [&] { return dot(conv_transpose3d(x, kern()), r); };
  std::vector<double> dw(w.size()), db(b.size());
  auto dx = conv_transpose3d_backward(x, kern(), r, ConvGrads<double>{dw, db});
  std::vector<double> analytic, numeric;
  append(analytic, dx.vec());
  append(analytic, dw);
  append(analytic, db);
  append(numeric, central_differences(f, x.vec(), all_coords(x.vec().size()), o.step));
  append(numeric, central_differences(f, w, all_coords(w.size()), o.step));
  append(numeric, central_differences(f, b, all_coords(b.size()), o.step));
  return finish("conv_transpose3d", o, seed, std::move(analytic), numeric, o.tol);
}

inline CheckResult check_maxpool3d(const SuiteOptions& o, std::uint64_t seed) {
  Rng rng(seed);
  Shape5 s{uniform_int(rng, 1, 2), uniform_int(rng, 1, 2), 2 * uniform_int(rng, 1, 3), 2 * uniform_int(rng, 1, 3),
           2 * uniform_int(rng, 1, 3)};
  // Distinct values on a 1e-2 lattice keep every window at least 1e-3 away from a tie.
  Tensor5<double> x(s);
  auto perm = all_coords(static_cast<std::size_t>(s.numel()));
  std::shuffle(perm.begin(), perm.end(), rng);
  for (Index i = 0; i < x.size(); ++i) x[i] = 0.01 * static_cast<double>(perm[static_cast<std::size_t>(i)]) - 1.0;
  auto pooled = maxpool3d(x);
  auto r = random_tensor(pooled.output.shape(), rng);
  auto f = [&] { return dot(maxpool3d(x).output, r); };
  auto dx = maxpool3d_backward(s, pooled.switches, r);
  return finish("maxpool3d", o, seed, dx.vec(), central_differences(f, x.vec(), all_coords(x.vec().size()), o.step),
                o.tol);
}

inline CheckResult check_relu(const SuiteOptions& o, std::uint64_t seed) {
  Rng rng(seed);
  auto x = away_from_zero({uniform_int(rng, 1, 2), uniform_int(rng, 1, 3), uniform_int(rng, 2, 6), uniform_int(rng, 2, 6),
                           uniform_int(rng, 2, 6)},
                          rng, 1e-3);
  auto r = random_tensor(x.shape(), rng);
  auto f = [&] { return dot(relu(x), r); };
  auto dx = relu_backward(x, r);
  return finish("relu", o, seed, dx.vec(), central_differences(f, x.vec(), all_coords(x.vec().size()), o.step), o.tol);
}

inline CheckResult check_batchnorm(const SuiteOptions& o, std::uint64_t seed) {
  Rng rng(seed);
  const Index C = uniform_int(rng, 1, 3);
  auto x = random_tensor({uniform_int(rng, 1, 2), C, uniform_int(rng, 2, 6), uniform_int(rng, 2, 6), uniform_int(rng, 2, 6)}, rng);
  auto gamma = random_vector(static_cast<std::size_t>(C), rng, 0.5, 1.5);
  auto beta = random_vector(static_cast<std::size_t>(C), rng);
  std::vector<double> rm(static_cast<std::size_t>(C), 0.0), rv(static_cast<std::size_t>(C), 1.0);
  auto state = [&] { return BatchNormState<double>{gamma, beta, rm, rv, 0.99, 1e-5}; };
  auto r = random_tensor(x.shape(), rng);
  auto f = [&] { return dot(batchnorm(x, state(), Mode::train), r); };
  BatchNormCache<double> cache;
  batchnorm(x, state(), Mode::train, &cache);
  std::vector<double> dg(gamma.size()), dbeta(beta.size());
  auto dx = batchnorm_backward(cache, std::span<const double>(gamma), r, BatchNormGrads<double>{dg, dbeta});
  std::vector<double> analytic, numeric;
  append(analytic, dx.vec());
  append(analytic, dg);
  append(analytic, dbeta);
  append(numeric, central_differences(f, x.vec(), all_coords(x.vec().size()), o.step));
  append(numeric, central_differences(f, gamma, all_coords(gamma.size()), o.step));
  append(numeric, central_differences(f, beta, all_coords(beta.size()), o.step));
  return finish("batchnorm", o, seed, std::move(analytic), numeric, o.tol);
}

inline Tensor5<std::uint8_t> random_labels(Shape5 s, Index K, Rng& rng) {
  Tensor5<std::uint8_t> l(s);
  std::uniform_int_distribution<int> u(0, static_cast<int>(K) - 1);
  for (auto& v : l.vec()) v = static_cast<std::uint8_t>(u(rng));
  return l;
}

inline CheckResult check_softmax_dice(const SuiteOptions& o, std::uint64_t seed) {
  Rng rng(seed);
  const Index K = uniform_int(rng, 2, 4);
  Shape5 s{uniform_int(rng, 1, 2), K, uniform_int(rng, 2, 6), uniform_int(rng, 2, 6), uniform_int(rng, 2, 6)};
  auto z = random_tensor(s, rng, -2.0, 2.0);
  auto onehot = one_hot<double>(random_labels({s.n, 1, s.d, s.h, s.w}, K, rng), K);
  auto f = [&] { return dice_loss(softmax_channels(z), onehot).value; };
  auto p = softmax_channels(z);
  auto dz = softmax_channels_backward(p, dice_loss_backward(p, onehot));
  return finish("softmax_dice_loss", o, seed, dz.vec(), central_differences(f, z.vec(), all_coords(z.vec().size()), o.step),
                o.tol);
}

inline CheckResult check_resampling(const SuiteOptions& o, std::uint64_t seed) {
  // upsample2x (trilinear) -> center_crop -> concat with a second tensor, against a random projection.
  Rng rng(seed);
  const Index P = 2 * uniform_int(rng, 1, 3);
  auto x = random_tensor({uniform_int(rng, 1, 2), uniform_int(rng, 1, 3), P, P, P}, rng);
  auto other = random_tensor({x.n(), 1, P, P, P}, rng);
  auto r = random_tensor({x.n(), 1 + x.c(), P, P, P}, rng);
  auto f = [&] { return dot(concat_channels(other, align_prediction(x, ContextMode::softmax_channels)), r); };
  auto [dother, dctx] = concat_channels_backward(r, 1);
  auto dx = align_prediction_backward(dctx, ContextMode::softmax_channels);
  return finish("upsample_crop_concat", o, seed, dx.vec(),
                central_differences(f, x.vec(), all_coords(x.vec().size()), o.step), o.tol);
}

// Flattened view over all trainable parameter values of a network.
struct ParamCoord {
  std::size_t record, index;
};

inline std::vector<ParamCoord> trainable_coords(const Network<double>& net) {
  std::vector<ParamCoord> c;
  for (std::size_t r = 0; r < net.params().size(); ++r)
    if (net.params()[r].trainable)
      for (std::size_t i = 0; i < net.params()[r].values.size(); ++i) c.push_back({r, i});
  return c;
}

// FD over sampled parameter coordinates of `net`; `f` evaluates the loss.
// ReLU on/off state and max-pool switches of the last train-mode forward pass.
inline void append_pattern(const Network<double>& net, std::vector<Index>& out) {
  for (const auto& u : net.cache().units)
    for (double v : u.output.vec()) out.push_back(v > 0.0);
  for (const auto& sw : net.cache().switches) out.insert(out.end(), sw.begin(), sw.end());
}

// Central differences over a piecewise-smooth composite. A coordinate counts only when the
// activation pattern at x - h and x + h equals the one at x: otherwise the segment crosses a
// kink and the quotient is no derivative. Such coordinates are skipped and counted.
struct SmoothFd {
  std::function<double()> f;
  std::function<std::vector<Index>()> pattern;
  std::vector<Index> base;
  double h = 1e-6;
  int kinks = 0;

  std::optional<double> at(std::span<double> x, std::size_t i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f();
    const bool same_up = pattern() == base;
    x[i] = saved - h;
    const double down = f();
    const bool same_down = pattern() == base;
    x[i] = saved;
    if (!same_up || !same_down) {
      ++kinks;
      return std::nullopt;
    }
    return (up - down) / (2.0 * h);
  }

  void add(std::span<double> x, std::span<const double> grad, std::span<const std::size_t> coords,
           std::vector<double>& analytic, std::vector<double>& numeric) {
    for (std::size_t i : coords)
      if (auto d = at(x, i)) {
        analytic.push_back(grad[i]);
        numeric.push_back(*d);
      }
  }
};

inline void param_fd(Network<double>& net, SmoothFd& fd, std::size_t samples, Rng& rng, std::vector<double>& analytic,
                     std::vector<double>& numeric) {
  const auto coords = trainable_coords(net);
  for (std::size_t k : sample_coords(coords.size(), samples, rng)) {
    auto& rec = net.params()[coords[k].record];
    const std::size_t one[1] = {coords[k].index};
    fd.add(rec.values, rec.grad, one, analytic, numeric);
  }
}

// At most a quarter of the sampled coordinates may be dropped as kinks.
inline CheckResult finish_smooth(const std::string& op, const SuiteOptions& o, std::uint64_t seed,
                                 std::vector<double> analytic, const std::vector<double>& numeric, double tol,
                                 const SmoothFd& fd) {
  auto r = finish(op, o, seed, std::move(analytic), numeric, tol);
  r.kinks = fd.kinks;
  r.usable = 4 * static_cast<std::size_t>(fd.kinks) <= numeric.size() + static_cast<std::size_t>(fd.kinks);
  return r;
}

inline CheckResult check_unet(const SuiteOptions& o, std::uint64_t seed) {
  Rng rng(seed);
  UNetConfig cfg{2, 2, 1, 3};
  auto net = build_unet<double>(cfg, seed);
  auto x = random_tensor({2, 1, 8, 8, 8}, rng);
  auto onehot = one_hot<double>(random_labels({2, 1, 8, 8, 8}, 3, rng), 3);
  auto f = [&] { return dice_loss(softmax_channels(unet_forward(net, x, Mode::train)), onehot).value; };
  auto pattern = [&] {
    std::vector<Index> v;
    append_pattern(net, v);
    return v;
  };
  net.zero_grad();
  auto p = softmax_channels(unet_forward(net, x, Mode::train));
  SmoothFd fd{f, pattern, pattern(), o.step * 0.1};
  auto dx = unet_backward(net, softmax_channels_backward(p, dice_loss_backward(p, onehot)), true);
  std::vector<double> analytic, numeric;
  param_fd(net, fd, 160, rng, analytic, numeric);
  const auto xc = sample_coords(static_cast<std::size_t>(x.size()), 40, rng);
  fd.add(x.vec(), dx.vec(), xc, analytic, numeric);
  return finish_smooth("unet_forward_backward", o, seed, std::move(analytic), numeric, o.composite_tol, fd);
}

inline CheckResult check_pyramid_end_to_end(const SuiteOptions& o, std::uint64_t seed) {
  Rng rng(seed);
  const Index P = 8, K = 3;
  auto cfg = PyramidConfig::uniform(2, P, ContextMode::softmax_channels, UNetConfig{2, 2, 1, K});
  auto model = build_pyramid<double>(cfg, seed);
  std::vector<Tensor5<double>> images{random_tensor({2, 1, P, P, P}, rng), random_tensor({2, 1, P, P, P}, rng)};
  std::vector<Tensor5<double>> labels{one_hot<double>(random_labels({2, 1, P, P, P}, K, rng), K),
                                      one_hot<double>(random_labels({2, 1, P, P, P}, K, rng), K)};
  auto f = [&] { return total_loss(pyramid_forward(model, images, Mode::train).softmax, labels).total; };
  auto pattern = [&] {
    std::vector<Index> v;
    for (const auto& n : model.nets) append_pattern(n, v);
    return v;
  };
  for (auto& n : model.nets) n.zero_grad();
  auto fw = pyramid_forward(model, images, Mode::train);
  SmoothFd fd{f, pattern, pattern(), o.step * 0.1};
  std::vector<Tensor5<double>> grads;
  total_loss(fw.softmax, labels, &grads);
  pyramid_backward(model, fw, std::move(grads), {true, true}, ContextGradient::end_to_end);
  std::vector<double> analytic, numeric;
  param_fd(model.nets[0], fd, 120, rng, analytic, numeric);
  param_fd(model.nets[1], fd, 60, rng, analytic, numeric);
  return finish_smooth("pyramid_total_loss_end_to_end", o, seed, std::move(analytic), numeric, o.composite_tol, fd);
}

}  // namespace detail

struct SuiteReport {
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass(); });
  }
  // Worst result per op, in suite order.
  std::vector<CheckResult> worst_per_op() const {
    std::vector<CheckResult> out;
    for (const auto& c : checks) {
      auto it = std::find_if(out.begin(), out.end(), [&](const CheckResult& w) { return w.op == c.op; });
      if (it == out.end())
        out.push_back(c);
      else if (c.rel_err > it->rel_err)
        *it = c;
    }
    return out;
  }
};

inline const std::vector<std::string>& suite_ops() {
  static const std::vector<std::string> ops{"conv3d",    "conv_transpose3d",  "maxpool3d",
                                            "relu",      "batchnorm",         "softmax_dice_loss",
                                            "upsample_crop_concat", "unet_forward_backward",
                                            "pyramid_total_loss_end_to_end"};
  return ops;
}

inline SuiteReport run_suite(const SuiteOptions& o) {
  using Check = CheckResult (*)(const SuiteOptions&, std::uint64_t);
  const Check checks[] = {detail::check_conv3d,        detail::check_conv_transpose3d, detail::check_maxpool3d,
                          detail::check_relu,          detail::check_batchnorm,        detail::check_softmax_dice,
                          detail::check_resampling,    detail::check_unet,             detail::check_pyramid_end_to_end};
  const auto start = std::chrono::steady_clock::now();
  SuiteReport rep;
  for (int i = 0; i < o.seeds; ++i) {
    const std::uint64_t s = o.seed * 1000003ULL + static_cast<std::uint64_t>(i);
    for (auto c : checks) rep.checks.push_back(c(o, s));
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace pyrseg::gradcheck
