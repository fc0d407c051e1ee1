#pragma once

#include <string>
#include <vector>

#include "pyrseg/tensor.hpp"

namespace pyrseg {

// Linear input offsets of the argmax of every pooling window, one per output element.
using SwitchIndices = std::vector<Index>;

template <typename T>
struct MaxPoolResult {
  Tensor5<T> output;
  SwitchIndices switches;
};

// 2x2x2 max pooling, stride 2. Ties go to the lowest linear input index.
template <typename T>
MaxPoolResult<T> maxpool3d(const Tensor5<T>& x) {
  const auto& s = x.shape();
  for (auto [dim, name] : {std::pair{s.d, "depth"}, std::pair{s.h, "height"}, std::pair{s.w, "width"}})
    if (dim % 2 != 0) throw ShapeError(std::string("maxpool3d: odd ") + name + " " + std::to_string(dim));
  MaxPoolResult<T> r{Tensor5<T>(Shape5{s.n, s.c, s.d / 2, s.h / 2, s.w / 2}), {}};
  r.switches.resize(static_cast<std::size_t>(r.output.size()));
  Index out = 0;
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index z = 0; z < s.d / 2; ++z)
        for (Index y = 0; y < s.h / 2; ++y)
          for (Index xx = 0; xx < s.w / 2; ++xx, ++out) {
            Index best = x.offset(n, c, 2 * z, 2 * y, 2 * xx);
            // Window offsets visited in increasing linear order so '>' keeps the lowest on ties.
            for (Index dz = 0; dz < 2; ++dz)
              for (Index dy = 0; dy < 2; ++dy)
                for (Index dx = 0; dx < 2; ++dx) {
                  const Index o = x.offset(n, c, 2 * z + dz, 2 * y + dy, 2 * xx + dx);
                  if (x[o] > x[best]) best = o;
                }
            r.output[out] = x[best];
            r.switches[out] = best;
          }
  return r;
}

template <typename T>
Tensor5<T> maxpool3d_backward(const Shape5& input_shape, const SwitchIndices& switches, const Tensor5<T>& dy) {
  if (static_cast<Index>(switches.size()) != dy.size())
    throw ShapeError("maxpool3d_backward: " + std::to_string(switches.size()) + " switches for cotangent of size " +
                     std::to_string(dy.size()));
  Tensor5<T> dx(input_shape);
  for (Index i = 0; i < dy.size(); ++i) dx[switches[i]] += dy[i];
  return dx;
}

}  // namespace pyrseg
