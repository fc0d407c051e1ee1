#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "pyrseg/tensor.hpp"

namespace pyrseg {

// Linear indices of the nonzero voxels of a (1, 1, D, H, W) label volume, for repeated
// uniform draws of training-patch centers.
class ForegroundIndex {
 public:
  ForegroundIndex() = default;
  explicit ForegroundIndex(const Tensor5<std::uint8_t>& labels) : dims_(labels.shape().dhw()) {
    if (labels.n() != 1 || labels.c() != 1) throw ShapeError("foreground index: expected a single label volume");
    for (Index i = 0; i < labels.size(); ++i)
      if (labels[i] != 0) voxels_.push_back(i);
  }

  std::size_t size() const { return voxels_.size(); }

  template <typename Rng>
  std::array<Index, 3> sample(Rng& rng) const {
    if (voxels_.empty()) throw ContractError("sample_foreground_center: label volume has no foreground voxel");
    const Index i = voxels_[std::uniform_int_distribution<std::size_t>(0, voxels_.size() - 1)(rng)];
    return {i / (dims_[1] * dims_[2]), i / dims_[2] % dims_[1], i % dims_[2]};
  }

 private:
  std::array<Index, 3> dims_{};
  std::vector<Index> voxels_;
};

// Uniform draw over voxels with a nonzero label.
template <typename Rng>
std::array<Index, 3> sample_foreground_center(const Tensor5<std::uint8_t>& labels, Rng& rng) {
  return ForegroundIndex(labels).sample(rng);
}

}  // namespace pyrseg
