#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "pyrseg/tensor.hpp"

namespace pyrseg {

// Non-owning view of convolution parameters stored elsewhere (usually in a Network).
// weights: (c_out, c_in, k, k, k), bias: c_out.
template <typename T>
struct ConvKernel {
  Index c_out = 0;
  Index c_in = 0;
  Index k = 0;
  std::span<const T> weights;
  std::span<const T> bias;

  Index fan_in() const { return c_in * k * k * k; }

  void validate() const {
    if (c_out < 1 || c_in < 1 || k < 1 || k > 3)
      throw ConfigError("conv kernel: invalid geometry c_out=" + std::to_string(c_out) + " c_in=" +
                        std::to_string(c_in) + " k=" + std::to_string(k));
    if (static_cast<Index>(weights.size()) != c_out * fan_in())
      throw ShapeError("conv kernel: weight length " + std::to_string(weights.size()) + " != " +
                       std::to_string(c_out * fan_in()));
    if (static_cast<Index>(bias.size()) != c_out)
      throw ShapeError("conv kernel: bias length " + std::to_string(bias.size()) + " != c_out " + std::to_string(c_out));
  }
};

// Gradient accumulators matching a ConvKernel; the backward passes add into them.
template <typename T>
struct ConvGrads {
  std::span<T> weights;
  std::span<T> bias;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Plain sequential sum: Eigen's vectorized reductions peel by pointer alignment, which makes
// results depend on where the allocator put the buffer.
template <typename T>
T row_sum(const T* p, Index n) {
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) acc += static_cast<double>(p[i]);
  return static_cast<T>(acc);
}

// Output voxels are processed in blocks of whole x-rows [r0, r1) so the column buffer stays
// cache resident.
inline Index conv_block_rows(Index fan_in, Index W, Index rows) {
  const Index budget = Index{1} << 18;  // elements
  return std::clamp<Index>(budget / std::max<Index>(1, fan_in * W), 1, rows);
}

// Row-major products put the voxels on Eigen's row axis. Padding that axis to a multiple of
// the kernel's row block sends every voxel through the same micro-kernel, so a voxel's
// result does not depend on the volume size (tiled inference is then bit-exact).
template <typename T>
Index padded_voxels(Index n) {
  constexpr Index mr = Eigen::internal::gebp_traits<T, T>::mr;
  return (n + mr - 1) / mr * mr;
}

// Rows ordered (ci, kz, ky, kx); columns are the output voxels of x-rows [r0, r1), where
// row r covers (z, y) = (r / H, r % H). Rows are `stride` long (default: the voxel count),
// zero beyond the voxels.
template <typename T>
void im2col(std::span<const T> in, Index channels, Index D, Index H, Index W, Index k, Index r0, Index r1,
            std::vector<T>& col, Index stride = 0) {
  const Index pad = (k - 1) / 2;
  const Index S = D * H * W, C = (r1 - r0) * W;
  if (stride < C) stride = C;
  // Every element is written exactly once, so the buffer is resized without clearing.
  col.resize(static_cast<std::size_t>(channels * k * k * k * stride));
  T* row = col.data();
  for (Index ci = 0; ci < channels; ++ci) {
    const T* src = in.data() + ci * S;
    for (Index kz = 0; kz < k; ++kz)
      for (Index ky = 0; ky < k; ++ky)
        for (Index kx = 0; kx < k; ++kx, row += stride) {
          std::fill(row + C, row + stride, T(0));
          const Index dz = kz - pad, dy = ky - pad, dx = kx - pad;
          const Index x0 = std::max<Index>(0, -dx), x1 = std::min<Index>(W, W - dx);
          for (Index r = r0; r < r1; ++r) {
            const Index sz = r / H + dz, sy = r % H + dy;
            T* o = row + (r - r0) * W;
            if (sz < 0 || sz >= D || sy < 0 || sy >= H || x1 <= x0) {
              std::fill_n(o, W, T(0));
              continue;
            }
            const T* s = src + (sz * H + sy) * W + dx;
            std::fill_n(o, x0, T(0));
            std::copy_n(s + x0, x1 - x0, o + x0);
            std::fill_n(o + x1, W - x1, T(0));
          }
        }
  }
}

// (rows x n) row-major copy of `src` with rows `stride` long, zero-padded.
template <typename T>
const T* padded_rows(const T* src, Index rows, Index n, Index stride, std::vector<T>& buf) {
  if (stride == n) return src;
  buf.assign(static_cast<std::size_t>(rows * stride), T(0));
  for (Index r = 0; r < rows; ++r) std::copy_n(src + r * n, n, buf.data() + r * stride);
  return buf.data();
}

template <typename T>
void check_conv_input(const Tensor5<T>& x, const ConvKernel<T>& k, const char* op) {
  k.validate();
  if (x.c() != k.c_in)
    throw ShapeError(std::string(op) + ": input has " + std::to_string(x.c()) + " channels, kernel expects " +
                     std::to_string(k.c_in));
}

}  // namespace detail

// Stride-1 convolution with zero "same" padding; spatial dims are preserved.
template <typename T>
Tensor5<T> conv3d(const Tensor5<T>& x, const ConvKernel<T>& k) {
  detail::check_conv_input(x, k, "conv3d");
  if (k.k % 2 == 0) throw ConfigError("conv3d: same padding needs an odd kernel, got k=" + std::to_string(k.k));
  const Index S = x.shape().spatial();
  Tensor5<T> y(Shape5{x.n(), k.c_out, x.d(), x.h(), x.w()});
  detail::ConstMapMat<T> Wm(k.weights.data(), k.c_out, k.fan_in());
  std::vector<T> col;
  detail::RowMat<T> Yp;
  for (Index n = 0; n < x.n(); ++n) {
    detail::MapMat<T> Y(y.item(n).data(), k.c_out, S);
    if (k.k == 1) {
      const Index Sp = detail::padded_voxels<T>(S);
      Yp.noalias() = Wm * detail::ConstMapMat<T>(detail::padded_rows(x.item(n).data(), k.c_in, S, Sp, col), k.c_in, Sp);
      Y = Yp.leftCols(S);
    } else {
      const Index rows = x.d() * x.h(), W = x.w(), step = detail::conv_block_rows(k.fan_in(), W, rows);
      for (Index r0 = 0; r0 < rows; r0 += step) {
        const Index r1 = std::min(rows, r0 + step), C = (r1 - r0) * W, Cp = detail::padded_voxels<T>(C);
        detail::im2col(x.item(n), k.c_in, x.d(), x.h(), x.w(), k.k, r0, r1, col, Cp);
        Yp.noalias() = Wm * detail::ConstMapMat<T>(col.data(), k.fan_in(), Cp);
        detail::StridedMap<T>(Y.data() + r0 * W, k.c_out, C, Eigen::OuterStride<>(S)) = Yp.leftCols(C);
      }
    }
    for (Index co = 0; co < k.c_out; ++co) Y.row(co).array() += k.bias[co];
  }
  return y;
}

// Adds parameter gradients into `grads` and returns the input cotangent (empty tensor
// when `need_input_grad` is false).
template <typename T>
Tensor5<T> conv3d_backward(const Tensor5<T>& x, const ConvKernel<T>& k, const Tensor5<T>& dy, ConvGrads<T> grads,
                           bool need_input_grad = true) {
  detail::check_conv_input(x, k, "conv3d_backward");
  if (dy.shape() != Shape5{x.n(), k.c_out, x.d(), x.h(), x.w()})
    throw ShapeError("conv3d_backward: cotangent shape " + dy.shape().str());
  const Index S = x.shape().spatial();
  detail::ConstMapMat<T> Wm(k.weights.data(), k.c_out, k.fan_in());
  detail::MapMat<T> dW(grads.weights.data(), k.c_out, k.fan_in());
  Tensor5<T> dx;
  if (need_input_grad) dx = Tensor5<T>(x.shape());
  std::vector<T> col;
  for (Index n = 0; n < x.n(); ++n) {
    detail::ConstMapMat<T> dY(dy.item(n).data(), k.c_out, S);
    for (Index co = 0; co < k.c_out; ++co) grads.bias[co] += detail::row_sum(dy.item(n).data() + co * S, S);
    if (k.k == 1) {
      detail::ConstMapMat<T> X(x.item(n).data(), k.c_in, S);
      dW.noalias() += dY * X.transpose();
      if (need_input_grad) detail::MapMat<T>(dx.item(n).data(), k.c_in, S).noalias() = Wm.transpose() * dY;
    } else {
      const Index rows = x.d() * x.h(), W = x.w(), step = detail::conv_block_rows(k.fan_in(), W, rows);
      for (Index r0 = 0; r0 < rows; r0 += step) {
        const Index r1 = std::min(rows, r0 + step), C = (r1 - r0) * W;
        detail::ConstStridedMap<T> dYb(dY.data() + r0 * W, k.c_out, C, Eigen::OuterStride<>(S));
        detail::im2col(x.item(n), k.c_in, x.d(), x.h(), x.w(), k.k, r0, r1, col);
        dW.noalias() += dYb * detail::ConstMapMat<T>(col.data(), k.fan_in(), C).transpose();
      }
    }
  }
  // The input cotangent of a same-padded conv is the conv of dy with the spatially flipped,
  // channel-transposed kernel; this keeps the GEMM inner dimension at 27 * c_out.
  if (need_input_grad && k.k > 1) {
    const Index kk = k.k * k.k * k.k;
    std::vector<T> flipped(static_cast<std::size_t>(k.c_in * k.c_out * kk)), zero(static_cast<std::size_t>(k.c_in), T(0));
    for (Index co = 0; co < k.c_out; ++co)
      for (Index ci = 0; ci < k.c_in; ++ci)
        for (Index o = 0; o < kk; ++o) flipped[(ci * k.c_out + co) * kk + (kk - 1 - o)] = k.weights[(co * k.c_in + ci) * kk + o];
    dx = conv3d(dy, ConvKernel<T>{k.c_in, k.c_out, k.k, flipped, zero});
  }
  return dx;
}

namespace detail {

// (c_out*8, c_in) matrix with row (co, a, b, c) holding weights[co, :, a, b, c].
template <typename T>
RowMat<T> deconv_matrix(const ConvKernel<T>& k) {
  RowMat<T> m(k.c_out * 8, k.c_in);
  for (Index co = 0; co < k.c_out; ++co)
    for (Index ci = 0; ci < k.c_in; ++ci)
      for (Index o = 0; o < 8; ++o) m(co * 8 + o, ci) = k.weights[(co * k.c_in + ci) * 8 + o];
  return m;
}

template <typename T>
void check_deconv(const Tensor5<T>& x, const ConvKernel<T>& k, const char* op) {
  if (k.k != 2)
    throw ConfigError(std::string(op) + ": only 2x2x2 kernels with stride 2 are supported, got k=" +
                      std::to_string(k.k));
  check_conv_input(x, k, op);
}

}  // namespace detail

// Transposed convolution, 2x2x2 kernel, stride 2: exactly doubles each spatial dim.
template <typename T>
Tensor5<T> conv_transpose3d(const Tensor5<T>& x, const ConvKernel<T>& k) {
  detail::check_deconv(x, k, "conv_transpose3d");
  const Index D = x.d(), H = x.h(), W = x.w(), S = D * H * W;
  Tensor5<T> y(Shape5{x.n(), k.c_out, 2 * D, 2 * H, 2 * W});
  const auto Wt = detail::deconv_matrix(k);
  const Index Sp = detail::padded_voxels<T>(S);
  detail::RowMat<T> Z(k.c_out * 8, Sp);
  std::vector<T> buf;
  for (Index n = 0; n < x.n(); ++n) {
    Z.noalias() = Wt * detail::ConstMapMat<T>(detail::padded_rows(x.item(n).data(), k.c_in, S, Sp, buf), k.c_in, Sp);
    for (Index co = 0; co < k.c_out; ++co) {
      const T b = k.bias[co];
      for (Index o = 0; o < 8; ++o) {
        const Index a = o >> 2, bb = (o >> 1) & 1, c = o & 1;
        const T* z = Z.row(co * 8 + o).data();
        for (Index iz = 0; iz < D; ++iz)
          for (Index iy = 0; iy < H; ++iy) {
            T* dst = &y(n, co, 2 * iz + a, 2 * iy + bb, c);
            const T* src = z + (iz * H + iy) * W;
            for (Index ix = 0; ix < W; ++ix) dst[2 * ix] = src[ix] + b;
          }
      }
    }
  }
  return y;
}

template <typename T>
Tensor5<T> conv_transpose3d_backward(const Tensor5<T>& x, const ConvKernel<T>& k, const Tensor5<T>& dy,
                                     ConvGrads<T> grads, bool need_input_grad = true) {
  detail::check_deconv(x, k, "conv_transpose3d_backward");
  const Index D = x.d(), H = x.h(), W = x.w(), S = D * H * W;
  if (dy.shape() != Shape5{x.n(), k.c_out, 2 * D, 2 * H, 2 * W})
    throw ShapeError("conv_transpose3d_backward: cotangent shape " + dy.shape().str());
  const auto Wt = detail::deconv_matrix(k);
  detail::RowMat<T> dZ(k.c_out * 8, S);
  detail::RowMat<T> dWt = detail::RowMat<T>::Zero(k.c_out * 8, k.c_in);
  Tensor5<T> dx;
  if (need_input_grad) dx = Tensor5<T>(x.shape());
  for (Index n = 0; n < x.n(); ++n) {
    for (Index co = 0; co < k.c_out; ++co) {
      T bsum = T(0);
      for (Index o = 0; o < 8; ++o) {
        const Index a = o >> 2, bb = (o >> 1) & 1, c = o & 1;
        T* z = dZ.row(co * 8 + o).data();
        for (Index iz = 0; iz < D; ++iz)
          for (Index iy = 0; iy < H; ++iy) {
            const T* src = &dy(n, co, 2 * iz + a, 2 * iy + bb, c);
            T* dst = z + (iz * H + iy) * W;
            for (Index ix = 0; ix < W; ++ix) dst[ix] = src[2 * ix];
          }
        bsum += detail::row_sum(z, S);
      }
      grads.bias[co] += bsum;
    }
    detail::ConstMapMat<T> X(x.item(n).data(), k.c_in, S);
    dWt.noalias() += dZ * X.transpose();
    if (need_input_grad) detail::MapMat<T>(dx.item(n).data(), k.c_in, S).noalias() = Wt.transpose() * dZ;
  }
  for (Index co = 0; co < k.c_out; ++co)
    for (Index ci = 0; ci < k.c_in; ++ci)
      for (Index o = 0; o < 8; ++o) grads.weights[(co * k.c_in + ci) * 8 + o] += dWt(co * 8 + o, ci);
  return dx;
}

}  // namespace pyrseg
