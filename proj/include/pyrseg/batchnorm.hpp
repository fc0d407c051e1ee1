#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pyrseg/tensor.hpp"

namespace pyrseg {

// Per-channel batch normalization parameters and running statistics (views into a Network).
template <typename T>
struct BatchNormState {
  std::span<const T> gamma;
  std::span<const T> beta;
  std::span<T> running_mean;
  std::span<T> running_var;
  T momentum = T(0.99);
  T eps = T(1e-5);

  Index channels() const { return static_cast<Index>(gamma.size()); }

  void validate(Index c) const {
    if (static_cast<Index>(gamma.size()) != c || static_cast<Index>(beta.size()) != c ||
        static_cast<Index>(running_mean.size()) != c || static_cast<Index>(running_var.size()) != c)
      throw ShapeError("batchnorm: state has " + std::to_string(gamma.size()) + " channels, input has " +
                       std::to_string(c));
  }
};

template <typename T>
struct BatchNormCache {
  Tensor5<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
struct BatchNormGrads {
  std::span<T> gamma;
  std::span<T> beta;
};

// Train mode normalizes with batch statistics over (N, D, H, W) and updates the running
// statistics as running = momentum * running + (1 - momentum) * batch (unbiased variance).
// Infer mode uses the running statistics and leaves the state untouched.
template <typename T>
Tensor5<T> batchnorm(const Tensor5<T>& x, BatchNormState<T> st, Mode mode, BatchNormCache<T>* cache = nullptr) {
  const Index C = x.c(), S = x.shape().spatial(), M = x.n() * S;
  st.validate(C);
  Tensor5<T> y(x.shape());
  if (mode == Mode::infer) {
    for (Index c = 0; c < C; ++c) {
      const T scale = st.gamma[c] / std::sqrt(st.running_var[c] + st.eps);
      const T shift = st.beta[c] - st.running_mean[c] * scale;
      for (Index n = 0; n < x.n(); ++n) {
        auto in = x.plane(n, c);
        auto out = y.plane(n, c);
        for (Index i = 0; i < S; ++i) out[i] = in[i] * scale + shift;
      }
    }
    return y;
  }
  if (M < 1) throw ShapeError("batchnorm: empty batch in train mode");
  if (cache) {
    cache->xhat = Tensor5<T>(x.shape());
    cache->inv_std.assign(static_cast<std::size_t>(C), T(0));
  }
  for (Index c = 0; c < C; ++c) {
    // Accumulate in double; float sums over 10^5 voxels drift noticeably.
    double sum = 0.0;
    for (Index n = 0; n < x.n(); ++n)
      for (T v : x.plane(n, c)) sum += v;
    const double mean = sum / static_cast<double>(M);
    double sq = 0.0;
    for (Index n = 0; n < x.n(); ++n)
      for (T v : x.plane(n, c)) sq += (v - mean) * (v - mean);
    const double var = sq / static_cast<double>(M);
    const T inv_std = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(st.eps)));
    const T m = static_cast<T>(mean);
    for (Index n = 0; n < x.n(); ++n) {
      auto in = x.plane(n, c);
      auto out = y.plane(n, c);
      T* xh = cache ? cache->xhat.plane(n, c).data() : nullptr;
      for (Index i = 0; i < S; ++i) {
        const T h = (in[i] - m) * inv_std;
        if (xh) xh[i] = h;
        out[i] = st.gamma[c] * h + st.beta[c];
      }
    }
    if (cache) cache->inv_std[c] = inv_std;
    const double unbiased = M > 1 ? sq / static_cast<double>(M - 1) : var;
    st.running_mean[c] = st.momentum * st.running_mean[c] + (T(1) - st.momentum) * m;
    st.running_var[c] = st.momentum * st.running_var[c] + (T(1) - st.momentum) * static_cast<T>(unbiased);
  }
  return y;
}

// Train-mode gradient. Adds into grads and returns dL/dx.
template <typename T>
Tensor5<T> batchnorm_backward(const BatchNormCache<T>& cache, std::span<const T> gamma, const Tensor5<T>& dy,
                              BatchNormGrads<T> grads) {
  cache.xhat.require_same_shape(dy, "batchnorm_backward");
  const Index C = dy.c(), S = dy.shape().spatial(), M = dy.n() * S;
  if (static_cast<Index>(gamma.size()) != C || static_cast<Index>(cache.inv_std.size()) != C)
    throw ShapeError("batchnorm_backward: channel mismatch");
  Tensor5<T> dx(dy.shape());
  for (Index c = 0; c < C; ++c) {
    double sdy = 0.0, sdyx = 0.0;
    for (Index n = 0; n < dy.n(); ++n) {
      auto g = dy.plane(n, c);
      auto h = cache.xhat.plane(n, c);
      for (Index i = 0; i < S; ++i) {
        sdy += g[i];
        sdyx += g[i] * h[i];
      }
    }
    grads.gamma[c] += static_cast<T>(sdyx);
    grads.beta[c] += static_cast<T>(sdy);
    const T k = gamma[c] * cache.inv_std[c] / static_cast<T>(M);
    const T sum_dy = static_cast<T>(sdy), sum_dyx = static_cast<T>(sdyx);
    for (Index n = 0; n < dy.n(); ++n) {
      auto g = dy.plane(n, c);
      auto h = cache.xhat.plane(n, c);
      auto out = dx.plane(n, c);
      for (Index i = 0; i < S; ++i) out[i] = k * (static_cast<T>(M) * g[i] - sum_dy - h[i] * sum_dyx);
    }
  }
  return dx;
}

}  // namespace pyrseg
