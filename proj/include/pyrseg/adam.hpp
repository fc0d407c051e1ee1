#pragma once

#include <cmath>
#include <span>
#include <string>

#include "pyrseg/unet.hpp"

namespace pyrseg {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const AdamConfig&) const = default;
};

// One bias-corrected Adam update at step t >= 1, in place.
template <typename T>
void adam_update(std::span<T> values, std::span<const T> grad, std::span<T> m, std::span<T> v, long t,
                 const AdamConfig& c) {
  if (grad.size() != values.size() || m.size() != values.size() || v.size() != values.size())
    throw ShapeError("adam_step: parameter, gradient and slot sizes differ (" + std::to_string(values.size()) + ", " +
                     std::to_string(grad.size()) + ", " + std::to_string(m.size()) + ", " + std::to_string(v.size()) + ")");
  if (t < 1) throw ContractError("adam_step: step counter must be >= 1");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double g = grad[i];
    const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * g;
    const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    values[i] = static_cast<T>(static_cast<double>(values[i]) - c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps));
  }
}

// Updates every trainable record of a network from its accumulated gradients.
template <typename T>
void adam_step(Network<T>& net, long t, const AdamConfig& c) {
  for (auto& p : net.params())
    if (p.trainable)
      adam_update<T>(std::span<T>(p.values), std::span<const T>(p.grad), std::span<T>(p.adam_m), std::span<T>(p.adam_v),
                     t, c);
}

}  // namespace pyrseg
