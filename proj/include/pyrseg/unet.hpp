#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "pyrseg/activation.hpp"
#include "pyrseg/batchnorm.hpp"
#include "pyrseg/conv.hpp"
#include "pyrseg/pool.hpp"
#include "pyrseg/resample.hpp"
#include "pyrseg/tensor.hpp"

namespace pyrseg {

struct UNetConfig {
  int levels = 4;
  Index base_channels = 32;
  Index in_channels = 1;
  Index num_classes = 8;

  void validate() const {
    if (levels < 2) throw ConfigError("unet: levels must be >= 2, got " + std::to_string(levels));
    if (levels > 8) throw ConfigError("unet: levels must be <= 8, got " + std::to_string(levels));
    if (base_channels < 1) throw ConfigError("unet: base_channels must be >= 1");
    if (in_channels < 1) throw ConfigError("unet: in_channels must be >= 1");
    if (num_classes < 2) throw ConfigError("unet: num_classes must be >= 2");
  }
  // Spatial dims of the input must be multiples of this.
  Index divisor() const { return Index{1} << (levels - 1); }
  // Feature width c_l of analysis level l (0-based); the level's second conv emits 2*c_l.
  Index width(int level) const { return base_channels << level; }

  bool operator==(const UNetConfig&) const = default;
};

enum class LayerKind { conv3, conv1, deconv2, batchnorm };

// One row of the per-layer table: every learnable layer in parameter order.
struct LayerSpec {
  std::string name;
  LayerKind kind;
  Index c_in;
  Index c_out;

  Index kernel() const { return kind == LayerKind::conv3 ? 3 : kind == LayerKind::deconv2 ? 2 : 1; }
  Index learnable() const {
    if (kind == LayerKind::batchnorm) return 2 * c_out;
    const Index k = kernel();
    return c_out * c_in * k * k * k + c_out;
  }
};

// Analysis level l: conv3(in -> c_l), BN, ReLU, conv3(c_l -> 2c_l), BN, ReLU, then 2x2x2 max
// pooling except at the deepest level. Synthesis level l (deepest-1 .. 0): deconv2
// (2c_{l+1} -> 2c_{l+1}), concat with the analysis skip (skip first), conv3(2c_l + 2c_{l+1} -> 2c_l),
// BN, ReLU, conv3(2c_l -> 2c_l), BN, ReLU. Head: conv1(2c_0 -> K), logits.
inline std::vector<LayerSpec> unet_layer_table(const UNetConfig& cfg) {
  cfg.validate();
  std::vector<LayerSpec> t;
  auto block = [&](const std::string& prefix, Index in, Index mid, Index out) {
    t.push_back({prefix + ".conv1", LayerKind::conv3, in, mid});
    t.push_back({prefix + ".bn1", LayerKind::batchnorm, mid, mid});
    t.push_back({prefix + ".conv2", LayerKind::conv3, mid, out});
    t.push_back({prefix + ".bn2", LayerKind::batchnorm, out, out});
  };
  Index in = cfg.in_channels;
  for (int l = 0; l < cfg.levels; ++l) {
    block("enc" + std::to_string(l + 1), in, cfg.width(l), 2 * cfg.width(l));
    in = 2 * cfg.width(l);
  }
  for (int l = cfg.levels - 2; l >= 0; --l) {
    const Index up = 2 * cfg.width(l + 1), skip = 2 * cfg.width(l);
    t.push_back({"dec" + std::to_string(l + 1) + ".up", LayerKind::deconv2, up, up});
    block("dec" + std::to_string(l + 1), skip + up, skip, skip);
  }
  t.push_back({"head", LayerKind::conv1, 2 * cfg.width(0), cfg.num_classes});
  return t;
}

inline Index unet_parameter_count(const UNetConfig& cfg) {
  Index total = 0;
  for (const auto& l : unet_layer_table(cfg)) total += l.learnable();
  return total;
}

template <typename T>
struct ParameterRecord {
  std::string name;
  std::vector<Index> shape;
  std::vector<T> values;
  std::vector<T> grad;
  std::vector<T> adam_m;
  std::vector<T> adam_v;
  bool trainable = true;

  Index numel() const { return static_cast<Index>(values.size()); }
};

// Ordered parameter store for one encoder-decoder network plus the activation cache of
// the last train-mode forward pass.
template <typename T>
class Network {
 public:
  explicit Network(UNetConfig cfg) : cfg_(cfg) {
    for (const auto& l : unet_layer_table(cfg_)) {
      if (l.kind == LayerKind::batchnorm) {
        bns_.push_back({add(l.name + ".gamma", {l.c_out}, T(1), true), add(l.name + ".beta", {l.c_out}, T(0), true),
                        add(l.name + ".running_mean", {l.c_out}, T(0), false),
                        add(l.name + ".running_var", {l.c_out}, T(1), false)});
      } else {
        const Index k = l.kernel();
        convs_.push_back({add(l.name + ".weight", {l.c_out, l.c_in, k, k, k}, T(0), true),
                          add(l.name + ".bias", {l.c_out}, T(0), true), l.c_in, l.c_out, k});
      }
    }
  }

  const UNetConfig& config() const { return cfg_; }
  std::vector<ParameterRecord<T>>& params() { return params_; }
  const std::vector<ParameterRecord<T>>& params() const { return params_; }

  ParameterRecord<T>& param(std::string_view name) { return params_[index_of(name)]; }
  const ParameterRecord<T>& param(std::string_view name) const { return params_[index_of(name)]; }

  // Learnable parameters only (BN running statistics excluded).
  Index parameter_count() const {
    Index n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }

  // He-normal weights (std = sqrt(2 / fan_in)), zero bias, gamma 1, beta 0, running mean 0, var 1.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const auto& c : convs_) {
      const Index fan_in = c.k == 2 ? c.c_in : c.c_in * c.k * c.k * c.k;
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (auto& w : params_[c.weight].values) w = static_cast<T>(dist(rng));
      std::fill(params_[c.bias].values.begin(), params_[c.bias].values.end(), T(0));
    }
    for (const auto& b : bns_) {
      std::fill(params_[b.gamma].values.begin(), params_[b.gamma].values.end(), T(1));
      std::fill(params_[b.beta].values.begin(), params_[b.beta].values.end(), T(0));
      std::fill(params_[b.mean].values.begin(), params_[b.mean].values.end(), T(0));
      std::fill(params_[b.var].values.begin(), params_[b.var].values.end(), T(1));
    }
    for (auto& p : params_) {
      std::fill(p.adam_m.begin(), p.adam_m.end(), T(0));
      std::fill(p.adam_v.begin(), p.adam_v.end(), T(0));
    }
  }

  void clear_cache() { cache_ = {}; }
  bool has_cache() const { return cache_.valid; }

  template <typename U>
  Network<U> cast() const {
    Network<U> out(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto conv = [](const std::vector<T>& a) { return std::vector<U>(a.begin(), a.end()); };
      out.params()[i].values = conv(params_[i].values);
      out.params()[i].adam_m = conv(params_[i].adam_m);
      out.params()[i].adam_v = conv(params_[i].adam_v);
    }
    return out;
  }

  // Conv -> BN -> ReLU unit activations kept for the backward pass.
  struct UnitCache {
    Tensor5<T> input;
    BatchNormCache<T> bn;
    Tensor5<T> output;
  };
  struct ForwardCache {
    bool valid = false;
    std::vector<UnitCache> units;           // conv-BN-ReLU units in execution order
    std::vector<Shape5> pool_inputs;        // per analysis level except the deepest
    std::vector<SwitchIndices> switches;    // idem
    std::vector<Tensor5<T>> deconv_inputs;  // per synthesis level, in execution order
    Tensor5<T> head_input;
  };

  ForwardCache& cache() { return cache_; }
  const ForwardCache& cache() const { return cache_; }

  // Layer views; conv and BN layers are numbered in layer-table order.
  std::size_t conv_count() const { return convs_.size(); }
  ConvKernel<T> kernel(std::size_t conv) const {
    const auto& c = convs_[conv];
    return {c.c_out, c.c_in, c.k, params_[c.weight].values, params_[c.bias].values};
  }
  ConvGrads<T> kernel_grads(std::size_t conv) {
    const auto& c = convs_[conv];
    return {params_[c.weight].grad, params_[c.bias].grad};
  }
  // Infer mode never writes the running statistics, so handing out mutable views from a
  // const network is sound as long as callers pass Mode::infer.
  BatchNormState<T> bn_state(std::size_t bn) const {
    const auto& b = bns_[bn];
    auto& p = const_cast<std::vector<ParameterRecord<T>>&>(params_);
    return {params_[b.gamma].values, params_[b.beta].values, p[b.mean].values, p[b.var].values, T(0.99), T(1e-5)};
  }
  BatchNormGrads<T> bn_grads(std::size_t bn) {
    const auto& b = bns_[bn];
    return {params_[b.gamma].grad, params_[b.beta].grad};
  }
  std::span<const T> bn_gamma(std::size_t bn) const { return params_[bns_[bn].gamma].values; }

 private:
  struct ConvSlot {
    std::size_t weight, bias;
    Index c_in, c_out, k;
  };
  struct BnSlot {
    std::size_t gamma, beta, mean, var;
  };

  std::size_t add(std::string name, std::vector<Index> shape, T fill, bool trainable) {
    Index n = 1;
    for (Index s : shape) n *= s;
    const auto sz = static_cast<std::size_t>(n);
    params_.push_back({std::move(name), std::move(shape), std::vector<T>(sz, fill), std::vector<T>(sz, T(0)),
                       std::vector<T>(sz, T(0)), std::vector<T>(sz, T(0)), trainable});
    return params_.size() - 1;
  }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw ConfigError("network has no parameter named '" + std::string(name) + "'");
  }

  UNetConfig cfg_;
  std::vector<ParameterRecord<T>> params_;
  std::vector<ConvSlot> convs_;
  std::vector<BnSlot> bns_;
  ForwardCache cache_;
};

template <typename T>
Network<T> build_unet(const UNetConfig& cfg, std::uint64_t seed) {
  Network<T> net(cfg);
  net.initialize(seed);
  return net;
}

namespace detail {

template <typename T>
void check_unet_input(const UNetConfig& cfg, const Tensor5<T>& x) {
  if (x.c() != cfg.in_channels)
    throw ShapeError("unet_forward: input has " + std::to_string(x.c()) + " channels, network expects " +
                     std::to_string(cfg.in_channels));
  const char* names[3] = {"depth", "height", "width"};
  const auto dhw = x.shape().dhw();
  for (int a = 0; a < 3; ++a)
    if (dhw[a] < 1 || dhw[a] % cfg.divisor() != 0)
      throw ShapeError(std::string("unet_forward: input ") + names[a] + " " + std::to_string(dhw[a]) +
                       " is not a positive multiple of " + std::to_string(cfg.divisor()));
}

}  // namespace detail

// Shared implementation of the forward pass. Conv/BN units are visited in the layer-table order.
template <typename T, typename Net, typename OnUnit>
Tensor5<T> unet_forward_impl(Net& net, const Tensor5<T>& x, Mode mode, OnUnit&& on_unit) {
  const auto& cfg = net.config();
  detail::check_unet_input(cfg, x);
  std::size_t conv = 0, bn = 0;
  auto unit = [&](const Tensor5<T>& in) {
    BatchNormCache<T> bcache;
    auto z = conv3d(in, net.kernel(conv));
    auto y = relu(batchnorm(z, net.bn_state(bn), mode, mode == Mode::train ? &bcache : nullptr));
    on_unit(in, std::move(bcache), y);
    ++conv;
    ++bn;
    return y;
  };
  std::vector<Tensor5<T>> skips;
  Tensor5<T> h = x;
  for (int l = 0; l < cfg.levels; ++l) {
    h = unit(unit(h));
    if (l + 1 < cfg.levels) {
      auto pooled = maxpool3d(h);
      if constexpr (!std::is_const_v<Net>) {
        if (mode == Mode::train) {
          net.cache().pool_inputs.push_back(h.shape());
          net.cache().switches.push_back(std::move(pooled.switches));
        }
      }
      skips.push_back(std::move(h));
      h = std::move(pooled.output);
    }
  }
  for (int l = cfg.levels - 2; l >= 0; --l) {
    auto up = conv_transpose3d(h, net.kernel(conv));
    if constexpr (!std::is_const_v<Net>) {
      if (mode == Mode::train) net.cache().deconv_inputs.push_back(std::move(h));
    }
    ++conv;
    h = unit(unit(concat_channels(skips[static_cast<std::size_t>(l)], up)));
  }
  auto logits = conv3d(h, net.kernel(conv));
  if constexpr (!std::is_const_v<Net>) {
    if (mode == Mode::train) net.cache().head_input = std::move(h);
  }
  return logits;
}

// Logits with num_classes channels and the input's spatial dims. Train mode uses batch
// statistics, updates BN running statistics and caches activations for unet_backward.
template <typename T>
Tensor5<T> unet_forward(Network<T>& net, const Tensor5<T>& x, Mode mode) {
  if (mode == Mode::infer) return unet_forward(std::as_const(net), x);
  net.clear_cache();
  auto logits = unet_forward_impl<T>(net, x, mode, [&](const Tensor5<T>& in, BatchNormCache<T>&& bc, const Tensor5<T>& y) {
    net.cache().units.push_back({in, std::move(bc), y});
  });
  net.cache().valid = true;
  return logits;
}

// Read-only inference with BN running statistics.
template <typename T>
Tensor5<T> unet_forward(const Network<T>& net, const Tensor5<T>& x) {
  return unet_forward_impl<T>(net, x, Mode::infer, [](const Tensor5<T>&, BatchNormCache<T>&&, const Tensor5<T>&) {});
}

// Accumulates parameter gradients from the cached train-mode forward pass. Returns the
// cotangent with respect to the network input (empty when need_input_grad is false).
template <typename T>
Tensor5<T> unet_backward(Network<T>& net, const Tensor5<T>& cotangent, bool need_input_grad = true) {
  if (!net.cache().valid) throw ContractError("unet_backward: no cached train-mode forward pass");
  const auto& cfg = net.config();
  auto& cache = net.cache();
  std::size_t conv = net.conv_count() - 1;
  std::size_t unit = cache.units.size();

  auto unit_backward = [&](Tensor5<T> dy, bool input_grad) {
    --unit;
    auto& u = cache.units[unit];
    relu_backward_from_output(u.output, dy);
    auto dz = batchnorm_backward(u.bn, net.bn_gamma(unit), dy, net.bn_grads(unit));
    auto dx = conv3d_backward(u.input, net.kernel(conv), dz, net.kernel_grads(conv), input_grad);
    --conv;
    return dx;
  };

  auto dh = conv3d_backward(cache.head_input, net.kernel(conv), cotangent, net.kernel_grads(conv), true);
  --conv;
  std::vector<Tensor5<T>> skip_grads(static_cast<std::size_t>(cfg.levels - 1));
  std::size_t deconv = cache.deconv_inputs.size();
  for (int l = 0; l <= cfg.levels - 2; ++l) {
    dh = unit_backward(unit_backward(std::move(dh), true), true);
    const Index skip_c = 2 * cfg.width(l);
    auto [dskip, dup] = concat_channels_backward(dh, skip_c);
    skip_grads[static_cast<std::size_t>(l)] = std::move(dskip);
    --deconv;
    dh = conv_transpose3d_backward(cache.deconv_inputs[deconv], net.kernel(conv), dup, net.kernel_grads(conv), true);
    --conv;
  }
  for (int l = cfg.levels - 1; l >= 0; --l) {
    if (l + 1 < cfg.levels) {
      auto dpool = maxpool3d_backward(cache.pool_inputs[static_cast<std::size_t>(l)],
                                      cache.switches[static_cast<std::size_t>(l)], dh);
      dpool += skip_grads[static_cast<std::size_t>(l)];
      dh = std::move(dpool);
    }
    dh = unit_backward(std::move(dh), true);
    dh = unit_backward(std::move(dh), l > 0 || need_input_grad);
  }
  return dh;
}

namespace detail {

struct Interval {
  Index lo, hi;
};

inline Index floor_div2(Index v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }

inline Interval hull(Interval a, Interval b) { return {std::min(a.lo, b.lo), std::max(a.hi, b.hi)}; }

// Input interval influencing the interval `iv` at the output of analysis level l.
inline Interval analysis_support(int l, Interval iv) {
  const Interval j{iv.lo - 2, iv.hi + 2};
  if (l == 0) return j;
  return analysis_support(l - 1, {2 * j.lo, 2 * j.hi + 1});
}

// Input interval influencing `iv` at the output of synthesis level l (deepest level is analysis).
inline Interval synthesis_support(const UNetConfig& cfg, int l, Interval iv) {
  if (l == cfg.levels - 1) return analysis_support(l, iv);
  const Interval j{iv.lo - 2, iv.hi + 2};
  return hull(analysis_support(l, j), synthesis_support(cfg, l + 1, {floor_div2(j.lo), floor_div2(j.hi)}));
}

}  // namespace detail

// Smallest r such that every output voxel depends only on input voxels within Chebyshev
// distance r. Support intervals are propagated backwards through the topology (3x3x3 conv
// widens by 1, pooling maps i -> [2i, 2i+1], deconv maps i -> floor(i/2)) for every output
// position modulo the network's total stride.
inline Index receptive_field_radius(const UNetConfig& cfg) {
  cfg.validate();
  Index r = 0;
  for (Index v = 0; v < cfg.divisor(); ++v) {
    const auto iv = detail::synthesis_support(cfg, 0, {v, v});
    r = std::max({r, v - iv.lo, iv.hi - v});
  }
  return r;
}

// Radius of a plain stack of stride-1 convolutions with odd kernel sizes.
inline Index receptive_field_radius(std::span<const Index> conv_kernel_sizes) {
  Index r = 0;
  for (Index k : conv_kernel_sizes) {
    if (k < 1 || k % 2 == 0) throw ConfigError("receptive_field_radius: kernel sizes must be odd");
    r += (k - 1) / 2;
  }
  return r;
}

}  // namespace pyrseg
