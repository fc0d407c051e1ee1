#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pyrseg/activation.hpp"
#include "pyrseg/loss.hpp"
#include "pyrseg/resample.hpp"
#include "pyrseg/unet.hpp"

namespace pyrseg {

// How a level's prediction is fed to the next level.
//   softmax_channels: the K probability maps (K extra input channels)
//   label_channel:    argmax labels scaled to [0, 1] (one extra channel)
//   none:             no fusion; every level sees only its own image
enum class ContextMode { softmax_channels, label_channel, none };

inline std::string to_string(ContextMode m) {
  switch (m) {
    case ContextMode::softmax_channels: return "softmax_channels";
    case ContextMode::label_channel: return "label_channel";
    default: return "none";
  }
}

inline ContextMode context_mode_from_string(const std::string& s) {
  if (s == "softmax_channels") return ContextMode::softmax_channels;
  if (s == "label_channel") return ContextMode::label_channel;
  if (s == "none") return ContextMode::none;
  throw ConfigError("unknown context mode '" + s + "' (expected softmax_channels, label_channel or none)");
}

// ds_s = 2S / 2^(s-1), s = 1..S. Level 1 is the coarsest.
inline std::vector<Index> downsample_factors(int S) {
  if (S < 1) throw ConfigError("downsample_factors: S must be >= 1, got " + std::to_string(S));
  if (S > 16) throw ConfigError("downsample_factors: S too large: " + std::to_string(S));
  std::vector<Index> ds;
  const Index top = 2 * S;
  for (int s = 0; s < S; ++s) {
    const Index div = Index{1} << s;
    if (top % div != 0)
      throw ConfigError("downsample_factors: S=" + std::to_string(S) + " gives a non-integral factor at level " +
                        std::to_string(s + 1));
    ds.push_back(top / div);
  }
  return ds;
}

struct PyramidConfig {
  int levels = 2;  // S
  Index patch_size = 64;
  ContextMode context = ContextMode::softmax_channels;
  std::vector<UNetConfig> nets;  // one per level; in_channels follow `context`

  // Same network template at every level, in_channels filled in per context mode.
  static PyramidConfig uniform(int S, Index patch, ContextMode context, UNetConfig net) {
    PyramidConfig c{S, patch, context, {}};
    for (int s = 0; s < S; ++s) {
      net.in_channels = c.expected_in_channels(s, net.num_classes);
      c.nets.push_back(net);
    }
    return c;
  }

  Index num_classes() const { return nets.front().num_classes; }
  std::vector<Index> factors() const { return downsample_factors(levels); }

  // 0-based level index.
  Index expected_in_channels(int s, Index K) const {
    if (s == 0 || context == ContextMode::none) return 1;
    return 1 + (context == ContextMode::softmax_channels ? K : 1);
  }
  Index context_channels() const {
    return context == ContextMode::softmax_channels ? num_classes() : context == ContextMode::label_channel ? 1 : 0;
  }

  void validate() const {
    factors();
    if (static_cast<int>(nets.size()) != levels)
      throw ConfigError("pyramid: " + std::to_string(nets.size()) + " network configs for S=" + std::to_string(levels));
    if (patch_size < 2 || patch_size % 2 != 0)
      throw ConfigError("pyramid: patch size must be a positive even number, got " + std::to_string(patch_size));
    for (int s = 0; s < levels; ++s) {
      const auto& n = nets[static_cast<std::size_t>(s)];
      n.validate();
      if (n.num_classes != num_classes()) throw ConfigError("pyramid: all levels must share num_classes");
      if (n.in_channels != expected_in_channels(s, n.num_classes))
        throw ConfigError("pyramid: level " + std::to_string(s + 1) + " has in_channels " +
                          std::to_string(n.in_channels) + ", expected " +
                          std::to_string(expected_in_channels(s, n.num_classes)) + " for context mode " +
                          to_string(context));
      if (patch_size % n.divisor() != 0)
        throw ConfigError("pyramid: patch size " + std::to_string(patch_size) + " not divisible by " +
                          std::to_string(n.divisor()));
    }
  }

  bool operator==(const PyramidConfig&) const = default;
};

template <typename T>
struct PyramidModel {
  PyramidConfig config;
  std::vector<Network<T>> nets;
};

template <typename T>
PyramidModel<T> build_pyramid(const PyramidConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PyramidModel<T> m{cfg, {}};
  for (int s = 0; s < cfg.levels; ++s)
    m.nets.push_back(build_unet<T>(cfg.nets[static_cast<std::size_t>(s)], seed + 7919 * static_cast<std::uint64_t>(s)));
  return m;
}

// Concentric multi-resolution patches around one center (original-resolution voxel
// coordinates). Level s covers [c - P*ds_s/2, c + P*ds_s/2) per axis on a P^3 grid of
// spacing ds_s.
struct AlignedPatchSet {
  std::array<Index, 3> center{};
  std::vector<Tensor5<float>> images;        // (1, 1, P, P, P) per level
  std::vector<Tensor5<std::uint8_t>> labels; // (1, 1, P, P, P) per level
};

// Zero/background padded window of extent^3 voxels starting at c - extent/2.
template <typename T>
Tensor5<T> extract_window(const Tensor5<T>& vol, const std::array<Index, 3>& center, Index extent, T pad = T(0)) {
  Tensor5<T> out(Shape5{vol.n(), vol.c(), extent, extent, extent}, pad);
  const auto dims = vol.shape().dhw();
  std::array<Index, 3> start{};
  for (int a = 0; a < 3; ++a) start[a] = center[a] - extent / 2;
  const Index x0 = std::max<Index>(0, -start[2]), x1 = std::min<Index>(extent, dims[2] - start[2]);
  if (x1 <= x0) return out;
  for (Index n = 0; n < vol.n(); ++n)
    for (Index c = 0; c < vol.c(); ++c)
      for (Index z = 0; z < extent; ++z) {
        const Index sz = start[0] + z;
        if (sz < 0 || sz >= dims[0]) continue;
        for (Index y = 0; y < extent; ++y) {
          const Index sy = start[1] + y;
          if (sy < 0 || sy >= dims[1]) continue;
          const T* src = &vol(n, c, sz, sy, start[2] + x0);
          std::copy(src, src + (x1 - x0), &out(n, c, z, y, x0));
        }
      }
  return out;
}

// Builds the aligned patch set from a window of extent P*ds_1 centered on `center`
// (as returned by extract_window, possibly augmented afterwards).
inline AlignedPatchSet aligned_patches_from_window(const Tensor5<float>& image_window,
                                                   const Tensor5<std::uint8_t>& label_window,
                                                   const std::array<Index, 3>& center, const PyramidConfig& cfg) {
  const auto ds = cfg.factors();
  const Index P = cfg.patch_size;
  const Index extent = P * ds.front();
  if (image_window.shape().dhw() != std::array<Index, 3>{extent, extent, extent} ||
      label_window.shape().dhw() != image_window.shape().dhw())
    throw ShapeError("aligned_patches_from_window: window must be " + std::to_string(extent) + "^3");
  AlignedPatchSet set{center, {}, {}};
  for (Index f : ds) {
    const std::array<Index, 3> e{P * f, P * f, P * f};
    set.images.push_back(downsample(center_crop(image_window, e), f, DownsampleMode::trilinear));
    set.labels.push_back(downsample(center_crop(label_window, e), f, DownsampleMode::label_majority));
  }
  return set;
}

// Level s image is the block average of the window at factor ds_s, labels the block mode;
// outside the volume the image is zero and the labels background.
inline AlignedPatchSet sample_aligned_patches(const Tensor5<float>& image, const Tensor5<std::uint8_t>& labels,
                                              const std::array<Index, 3>& center, const PyramidConfig& cfg) {
  if (image.shape().dhw() != labels.shape().dhw())
    throw ShapeError("sample_aligned_patches: image and labels differ in size");
  const Index extent = cfg.patch_size * cfg.factors().front();
  return aligned_patches_from_window(extract_window(image, center, extent, 0.0f),
                                     extract_window(labels, center, extent, std::uint8_t{0}), center, cfg);
}

// Brings a level-(s-1) prediction onto the level-s patch grid: 2x upsampling (trilinear for
// probability maps, nearest for the label channel) followed by a central crop back to P^3.
template <typename T>
Tensor5<T> align_prediction(const Tensor5<T>& pred_prev, ContextMode mode) {
  const auto dhw = pred_prev.shape().dhw();
  if (dhw[0] != dhw[1] || dhw[1] != dhw[2]) throw ShapeError("align_prediction: expected a cubic patch");
  const Interp interp = mode == ContextMode::label_channel ? Interp::nearest : Interp::trilinear;
  return center_crop(upsample2x(pred_prev, interp), dhw);
}

template <typename T>
Tensor5<T> align_prediction_backward(const Tensor5<T>& dy, ContextMode mode) {
  const auto s = dy.shape();
  const Interp interp = mode == ContextMode::label_channel ? Interp::nearest : Interp::trilinear;
  return upsample2x_backward(center_crop_backward(dy, Shape5{s.n, s.c, 2 * s.d, 2 * s.h, 2 * s.w}), interp);
}

// Context tensor handed to the next level for a softmax map p.
template <typename T>
Tensor5<T> context_from_softmax(const Tensor5<T>& p, ContextMode mode) {
  if (mode != ContextMode::label_channel) return p;
  auto lab = argmax_channels(p);
  const T scale = T(1) / static_cast<T>(std::max<Index>(1, p.c() - 1));
  for (auto& v : lab.vec()) v *= scale;
  return lab;
}

// Stacks single-item tensors along the batch axis.
template <typename T>
Tensor5<T> stack_batch(const std::vector<const Tensor5<T>*>& items) {
  if (items.empty()) throw ShapeError("stack_batch: no items");
  Shape5 s = items.front()->shape();
  const Index per = s.c * s.spatial();
  Tensor5<T> out(Shape5{static_cast<Index>(items.size()), s.c, s.d, s.h, s.w});
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != s) throw ShapeError("stack_batch: items differ in shape");
    std::copy(items[i]->data(), items[i]->data() + per, out.data() + static_cast<Index>(i) * per);
  }
  return out;
}

enum class ContextGradient { end_to_end, detached };

// State of a pyramid forward pass over a batch of aligned patch sets.
template <typename T>
struct PyramidForward {
  std::vector<Tensor5<T>> softmax;  // per level, (N, K, P, P, P)
  std::vector<Tensor5<T>> inputs;   // per level network input
};

// Level 1 consumes X_1; level s > 1 consumes concat(X_s, align_prediction(context of level s-1)).
// `level_images[s]` is (N, 1, P, P, P). `frozen_levels` run in infer mode (no cache), which
// is how separately trained lower levels are evaluated while training a higher one.
template <typename T>
PyramidForward<T> pyramid_forward(PyramidModel<T>& model, const std::vector<Tensor5<T>>& level_images, Mode mode,
                                  int frozen_levels = 0, int up_to_level = -1) {
  const auto& cfg = model.config;
  const int S = up_to_level < 0 ? cfg.levels : up_to_level;
  if (static_cast<int>(level_images.size()) < S)
    throw ShapeError("pyramid_forward: " + std::to_string(level_images.size()) + " level images for " +
                     std::to_string(S) + " levels");
  PyramidForward<T> f;
  for (int s = 0; s < S; ++s) {
    const auto& img = level_images[static_cast<std::size_t>(s)];
    if (img.c() != 1) throw ShapeError("pyramid_forward: level images must have one channel");
    Tensor5<T> in = (s == 0 || cfg.context == ContextMode::none)
                        ? img
                        : concat_channels(img, align_prediction(context_from_softmax(f.softmax.back(), cfg.context),
                                                                cfg.context));
    auto& net = model.nets[static_cast<std::size_t>(s)];
    const Mode m = s < frozen_levels ? Mode::infer : mode;
    auto logits = m == Mode::train ? unet_forward(net, in, Mode::train) : unet_forward(std::as_const(net), in);
    f.softmax.push_back(softmax_channels(logits));
    f.inputs.push_back(std::move(in));
  }
  return f;
}

struct TotalLoss {
  double total = 0.0;
  std::vector<double> levels;
};

// L_total = sum_s DiceLoss(map_s, labels_s); optionally returns dL_s/dp_s per level.
template <typename T>
TotalLoss total_loss(const std::vector<Tensor5<T>>& maps, const std::vector<Tensor5<T>>& labels_onehot,
                     std::vector<Tensor5<T>>* grads = nullptr) {
  if (maps.size() != labels_onehot.size())
    throw ShapeError("total_loss: " + std::to_string(maps.size()) + " maps vs " + std::to_string(labels_onehot.size()) +
                     " label sets");
  TotalLoss t;
  if (grads) grads->clear();
  for (std::size_t s = 0; s < maps.size(); ++s) {
    const double v = dice_loss(maps[s], labels_onehot[s]).value;
    t.levels.push_back(v);
    t.total += v;
    if (grads) grads->push_back(dice_loss_backward(maps[s], labels_onehot[s]));
  }
  return t;
}

// Backpropagates per-level cotangents dL/dp_s through the pyramid. Levels listed in
// `trainable` must have run in train mode. With ContextGradient::end_to_end the cotangent
// of each fused context flows through align_prediction into the level below (softmax
// context only; argmax labels carry no gradient). Returns nothing; parameter gradients are
// accumulated in each network.
template <typename T>
void pyramid_backward(PyramidModel<T>& model, const PyramidForward<T>& f, std::vector<Tensor5<T>> dsoftmax,
                      const std::vector<bool>& trainable, ContextGradient mode) {
  const auto& cfg = model.config;
  const int S = static_cast<int>(f.softmax.size());
  for (int s = S - 1; s >= 0; --s) {
    const auto si = static_cast<std::size_t>(s);
    if (!trainable[si]) continue;
    if (dsoftmax[si].empty()) continue;
    auto dlogits = softmax_channels_backward(f.softmax[si], dsoftmax[si]);
    const bool pass_down = s > 0 && mode == ContextGradient::end_to_end &&
                           cfg.context == ContextMode::softmax_channels && trainable[si - 1];
    auto din = unet_backward(model.nets[si], dlogits, pass_down);
    if (pass_down) {
      auto [dimg, dctx] = concat_channels_backward(din, 1);
      auto dprev = align_prediction_backward(dctx, cfg.context);
      if (dsoftmax[si - 1].empty())
        dsoftmax[si - 1] = std::move(dprev);
      else
        dsoftmax[si - 1] += dprev;
    }
  }
}

}  // namespace pyrseg
