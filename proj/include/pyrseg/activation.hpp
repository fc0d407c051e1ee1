#pragma once

#include <algorithm>
#include <cmath>

#include "pyrseg/tensor.hpp"

namespace pyrseg {

template <typename T>
Tensor5<T> relu(Tensor5<T> x) {
  for (auto& v : x.vec()) v = v > T(0) ? v : T(0);
  return x;
}

// Gradient passes where the forward input was strictly positive.
template <typename T>
Tensor5<T> relu_backward(const Tensor5<T>& x, Tensor5<T> dy) {
  x.require_same_shape(dy, "relu_backward");
  for (Index i = 0; i < x.size(); ++i)
    if (!(x[i] > T(0))) dy[i] = T(0);
  return dy;
}

// Same as relu_backward, but masks by the forward output (y > 0 iff x > 0).
template <typename T>
void relu_backward_from_output(const Tensor5<T>& y, Tensor5<T>& dy) {
  y.require_same_shape(dy, "relu_backward");
  for (Index i = 0; i < y.size(); ++i)
    if (!(y[i] > T(0))) dy[i] = T(0);
}

// Per-voxel softmax across the channel axis, max-subtracted.
template <typename T>
Tensor5<T> softmax_channels(const Tensor5<T>& x) {
  Tensor5<T> p(x.shape());
  const Index C = x.c(), S = x.shape().spatial();
  for (Index n = 0; n < x.n(); ++n) {
    const T* in = x.item(n).data();
    T* out = p.item(n).data();
    for (Index i = 0; i < S; ++i) {
      T m = in[i];
      for (Index c = 1; c < C; ++c) m = std::max(m, in[c * S + i]);
      T sum = T(0);
      for (Index c = 0; c < C; ++c) sum += (out[c * S + i] = std::exp(in[c * S + i] - m));
      for (Index c = 0; c < C; ++c) out[c * S + i] /= sum;
    }
  }
  return p;
}

// Given the softmax output p and dL/dp, returns dL/dlogits.
template <typename T>
Tensor5<T> softmax_channels_backward(const Tensor5<T>& p, const Tensor5<T>& dp) {
  p.require_same_shape(dp, "softmax_channels_backward");
  Tensor5<T> dx(p.shape());
  const Index C = p.c(), S = p.shape().spatial();
  for (Index n = 0; n < p.n(); ++n) {
    const T* pp = p.item(n).data();
    const T* g = dp.item(n).data();
    T* out = dx.item(n).data();
    for (Index i = 0; i < S; ++i) {
      T inner = T(0);
      for (Index c = 0; c < C; ++c) inner += pp[c * S + i] * g[c * S + i];
      for (Index c = 0; c < C; ++c) out[c * S + i] = pp[c * S + i] * (g[c * S + i] - inner);
    }
  }
  return dx;
}

// Per-voxel channel argmax; ties go to the lowest channel. Output has one channel.
template <typename T>
Tensor5<T> argmax_channels(const Tensor5<T>& p) {
  Tensor5<T> out(Shape5{p.n(), 1, p.d(), p.h(), p.w()});
  const Index C = p.c(), S = p.shape().spatial();
  for (Index n = 0; n < p.n(); ++n) {
    const T* pp = p.item(n).data();
    for (Index i = 0; i < S; ++i) {
      Index best = 0;
      for (Index c = 1; c < C; ++c)
        if (pp[c * S + i] > pp[best * S + i]) best = c;
      out[n * S + i] = static_cast<T>(best);
    }
  }
  return out;
}

}  // namespace pyrseg
