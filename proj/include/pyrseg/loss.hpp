#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <string>
#include <vector>

#include "pyrseg/tensor.hpp"

namespace pyrseg {

inline constexpr double kDiceEpsilon = 1e-5;

// K-channel indicator tensor from single-channel integer labels in [0, K).
template <typename T, std::integral L>
Tensor5<T> one_hot(const Tensor5<L>& labels, Index num_classes) {
  if (labels.c() != 1) throw ShapeError("one_hot: labels must have one channel, got " + std::to_string(labels.c()));
  if (num_classes < 1) throw ConfigError("one_hot: num_classes must be >= 1");
  const Index S = labels.shape().spatial();
  Tensor5<T> out(Shape5{labels.n(), num_classes, labels.d(), labels.h(), labels.w()});
  for (Index n = 0; n < labels.n(); ++n) {
    auto src = labels.item(n);
    auto dst = out.item(n);
    for (Index i = 0; i < S; ++i) {
      const auto k = static_cast<Index>(src[i]);
      if (k < 0 || k >= num_classes)
        throw ContractError("one_hot: label " + std::to_string(k) + " outside [0, " + std::to_string(num_classes) + ")");
      dst[k * S + i] = T(1);
    }
  }
  return out;
}

struct DiceLossValue {
  double value = 0.0;
  std::vector<double> class_terms;  // (2 I_k + eps) / (P_k + G_k + eps) per class
};

namespace detail {

struct DiceSums {
  std::vector<double> inter, pred, truth;
};

template <typename T>
DiceSums dice_sums(const Tensor5<T>& p, const Tensor5<T>& l) {
  p.require_same_shape(l, "dice_loss");
  const Index K = p.c(), S = p.shape().spatial();
  DiceSums s{std::vector<double>(K, 0.0), std::vector<double>(K, 0.0), std::vector<double>(K, 0.0)};
  for (Index n = 0; n < p.n(); ++n) {
    const T* pp = p.item(n).data();
    const T* ll = l.item(n).data();
    for (Index i = 0; i < S; ++i) {
      double total = 0.0;
      for (Index k = 0; k < K; ++k) total += pp[k * S + i];
      if (std::abs(total - 1.0) > 1e-4)
        throw ContractError("dice_loss: prediction not normalized at voxel " + std::to_string(n * S + i) +
                            " (channel sum " + std::to_string(total) + ")");
    }
    for (Index k = 0; k < K; ++k) {
      double a = 0.0, b = 0.0, c = 0.0;
      for (Index i = 0; i < S; ++i) {
        a += static_cast<double>(pp[k * S + i]) * ll[k * S + i];
        b += pp[k * S + i];
        c += ll[k * S + i];
      }
      s.inter[k] += a;
      s.pred[k] += b;
      s.truth[k] += c;
    }
  }
  return s;
}

}  // namespace detail

// Multi-class soft Dice loss:
//   L = -(1/K) sum_k (2 sum_i p_ik l_ik + eps) / (sum_i p_ik + sum_i l_ik + eps)
// with voxel sums pooled over the whole batch. A class absent from both p and l scores 1.
template <typename T>
DiceLossValue dice_loss(const Tensor5<T>& p, const Tensor5<T>& l_onehot, double eps = kDiceEpsilon) {
  const auto s = detail::dice_sums(p, l_onehot);
  const auto K = s.inter.size();
  DiceLossValue out;
  out.class_terms.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    out.class_terms[k] = (2.0 * s.inter[k] + eps) / (s.pred[k] + s.truth[k] + eps);
    out.value -= out.class_terms[k];
  }
  out.value /= static_cast<double>(K);
  return out;
}

// dL/dp for dice_loss.
template <typename T>
Tensor5<T> dice_loss_backward(const Tensor5<T>& p, const Tensor5<T>& l_onehot, double eps = kDiceEpsilon) {
  const auto s = detail::dice_sums(p, l_onehot);
  const Index K = p.c(), S = p.shape().spatial();
  std::vector<T> a(K), b(K);  // dL/dp_ik = a_k * l_ik + b_k
  for (Index k = 0; k < K; ++k) {
    const double den = s.pred[k] + s.truth[k] + eps;
    a[k] = static_cast<T>(-2.0 / (den * static_cast<double>(K)));
    b[k] = static_cast<T>((2.0 * s.inter[k] + eps) / (den * den * static_cast<double>(K)));
  }
  Tensor5<T> g(p.shape());
  for (Index n = 0; n < p.n(); ++n)
    for (Index k = 0; k < K; ++k) {
      auto ll = l_onehot.plane(n, k);
      auto gg = g.plane(n, k);
      for (Index i = 0; i < S; ++i) gg[i] = a[k] * ll[i] + b[k];
    }
  return g;
}

}  // namespace pyrseg
