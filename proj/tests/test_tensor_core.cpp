#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "pyrseg/activation.hpp"
#include "pyrseg/batchnorm.hpp"
#include "pyrseg/conv.hpp"
#include "pyrseg/gradcheck.hpp"
#include "pyrseg/pool.hpp"
#include "pyrseg/resample.hpp"

using namespace pyrseg;

namespace {

Tensor5<double> random_tensor(Shape5 s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor5<double> t(s);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

// Direct stride-2, 2x2x2 convolution: out[ci, z, y, x] = sum_co sum_abc w[co, ci, abc] * y[co, 2z+a, 2y+b, 2x+c].
// This is the map whose adjoint conv_transpose3d must be.
Tensor5<double> conv_stride2(const Tensor5<double>& y, const std::vector<double>& w, Index cout, Index cin) {
  Tensor5<double> out(Shape5{y.n(), cin, y.d() / 2, y.h() / 2, y.w() / 2});
  for (Index n = 0; n < y.n(); ++n)
    for (Index ci = 0; ci < cin; ++ci)
      for (Index z = 0; z < out.d(); ++z)
        for (Index yy = 0; yy < out.h(); ++yy)
          for (Index x = 0; x < out.w(); ++x) {
            double acc = 0.0;
            for (Index co = 0; co < cout; ++co)
              for (Index a = 0; a < 2; ++a)
                for (Index b = 0; b < 2; ++b)
                  for (Index c = 0; c < 2; ++c)
                    acc += w[((co * cin + ci) * 2 + a) * 4 + b * 2 + c] * y(n, co, 2 * z + a, 2 * yy + b, 2 * x + c);
            out(n, ci, z, yy, x) = acc;
          }
  return out;
}

}  // namespace

TEST(Conv3d, AllOnesCountsZeroPaddedOverlap) {
  Tensor5<float> x(1, 1, 3, 3, 3, 1.0f);
  std::vector<float> w(27, 1.0f), b(1, 0.0f);
  auto y = conv3d(x, ConvKernel<float>{1, 1, 3, w, b});
  EXPECT_FLOAT_EQ(y(0, 0, 0, 0, 0), 8.0f);
  EXPECT_FLOAT_EQ(y(0, 0, 0, 1, 1), 18.0f);
  EXPECT_FLOAT_EQ(y(0, 0, 1, 1, 1), 27.0f);
}

TEST(Conv3d, DeltaKernelIsIdentity) {
  auto x = random_tensor({2, 3, 4, 5, 6}, 1);
  std::vector<double> w(3 * 3 * 27, 0.0), b(3, 0.0);
  for (Index c = 0; c < 3; ++c) w[static_cast<std::size_t>((c * 3 + c) * 27 + 13)] = 1.0;
  auto y = conv3d(x, ConvKernel<double>{3, 3, 3, w, b});
  EXPECT_EQ(y, x);
}

TEST(Conv3d, Errors) {
  Tensor5<double> x(1, 2, 4, 4, 4);
  std::vector<double> w(27), b(1), w2(8);
  EXPECT_THROW(conv3d(x, ConvKernel<double>{1, 1, 3, w, b}), ShapeError);
  Tensor5<double> x1(1, 1, 4, 4, 4);
  EXPECT_THROW(conv3d(x1, ConvKernel<double>{1, 1, 2, w2, b}), ConfigError);
}

TEST(Conv3d, PointwiseKernelMatchesChannelMix) {
  auto x = random_tensor({1, 2, 2, 3, 2}, 5);
  std::vector<double> w{0.5, -2.0, 1.5, 3.0}, b{0.25, -1.0};
  auto y = conv3d(x, ConvKernel<double>{2, 2, 1, w, b});
  for (Index i = 0; i < 12; ++i) {
    EXPECT_NEAR(y[i], 0.5 * x[i] - 2.0 * x[12 + i] + 0.25, 1e-12);
    EXPECT_NEAR(y[12 + i], 1.5 * x[i] + 3.0 * x[12 + i] - 1.0, 1e-12);
  }
}

// A voxel's result must not depend on the size of the volume it sits in.
TEST(Conv3d, InteriorVoxelsBitIdenticalAcrossVolumeSizes) {
  std::mt19937_64 rng(17);
  std::normal_distribution<float> g;
  for (Index cin : {3, 16}) {
    std::vector<float> w(static_cast<std::size_t>(8 * cin * 27)), b(8);
    for (auto& v : w) v = g(rng);
    const ConvKernel<float> k{8, cin, 3, w, b};
    Tensor5<float> big(1, cin, 21, 24, 19);
    for (auto& v : big.vec()) v = g(rng);
    Tensor5<float> part(1, cin, 13, 10, 11);
    for (Index c = 0; c < cin; ++c)
      for (Index z = 0; z < 13; ++z)
        for (Index y = 0; y < 10; ++y)
          for (Index x = 0; x < 11; ++x) part(0, c, z, y, x) = big(0, c, z + 5, y + 7, x + 3);
    const auto yb = conv3d(big, k), yp = conv3d(part, k);
    for (Index c = 0; c < 8; ++c)
      for (Index z = 1; z < 12; ++z)
        for (Index y = 1; y < 9; ++y)
          for (Index x = 1; x < 10; ++x) ASSERT_EQ(yp(0, c, z, y, x), yb(0, c, z + 5, y + 7, x + 3));
  }
}

TEST(ConvTranspose3d, SingleVoxelAllOnesKernel) {
  Tensor5<float> x(1, 1, 1, 1, 1, 2.5f);
  std::vector<float> w(8, 1.0f), b(1, 0.0f);
  auto y = conv_transpose3d(x, ConvKernel<float>{1, 1, 2, w, b});
  ASSERT_EQ(y.shape(), (Shape5{1, 1, 2, 2, 2}));
  for (float v : y.vec()) EXPECT_FLOAT_EQ(v, 2.5f);
}

TEST(ConvTranspose3d, RejectsNonTwoKernel) {
  Tensor5<double> x(1, 1, 2, 2, 2);
  std::vector<double> w(27), b(1);
  EXPECT_THROW(conv_transpose3d(x, ConvKernel<double>{1, 1, 3, w, b}), ConfigError);
}

TEST(ConvTranspose3d, IsAdjointOfStrideTwoConvolution) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Index cin = 1 + seed % 3, cout = 1 + (seed / 3) % 3;
    auto x = random_tensor({2, cin, 2, 3, 1 + static_cast<Index>(seed % 3)}, seed);
    auto y = random_tensor({2, cout, 2 * x.d(), 2 * x.h(), 2 * x.w()}, seed + 100);
    auto wt = random_tensor({cout, cin, 2, 2, 2}, seed + 200);
    std::vector<double> b(static_cast<std::size_t>(cout), 0.0);
    const double lhs = dot(conv_transpose3d(x, ConvKernel<double>{cout, cin, 2, wt.vec(), b}), y);
    const double rhs = dot(x, conv_stride2(y, wt.vec(), cout, cin));
    EXPECT_LE(std::abs(lhs - rhs) / std::max(std::abs(lhs), 1e-12), 1e-6) << "seed " << seed;
  }
}

TEST(ConvTranspose3d, VoxelsBitIdenticalAcrossVolumeSizes) {
  std::mt19937_64 rng(18);
  std::normal_distribution<float> g;
  std::vector<float> w(16 * 16 * 8), b(16);
  for (auto& v : w) v = g(rng);
  const ConvKernel<float> k{16, 16, 2, w, b};
  Tensor5<float> big(1, 16, 9, 12, 7);
  for (auto& v : big.vec()) v = g(rng);
  Tensor5<float> part(1, 16, 5, 3, 6);
  for (Index c = 0; c < 16; ++c)
    for (Index z = 0; z < 5; ++z)
      for (Index y = 0; y < 3; ++y)
        for (Index x = 0; x < 6; ++x) part(0, c, z, y, x) = big(0, c, z + 2, y + 4, x + 1);
  const auto yb = conv_transpose3d(big, k), yp = conv_transpose3d(part, k);
  for (Index c = 0; c < 16; ++c)
    for (Index z = 0; z < 10; ++z)
      for (Index y = 0; y < 6; ++y)
        for (Index x = 0; x < 12; ++x) ASSERT_EQ(yp(0, c, z, y, x), yb(0, c, z + 4, y + 8, x + 2));
}

TEST(MaxPool3d, BlockOfOneToEight) {
  Tensor5<float> x(1, 1, 2, 2, 2);
  std::iota(x.vec().begin(), x.vec().end(), 1.0f);
  auto r = maxpool3d(x);
  EXPECT_FLOAT_EQ(r.output[0], 8.0f);
  EXPECT_EQ(r.switches[0], 7);
}

TEST(MaxPool3d, TiesGoToLowestIndex) {
  Tensor5<float> x(1, 2, 4, 4, 4, 3.0f);
  auto r = maxpool3d(x);
  for (Index i = 0; i < r.output.size(); ++i) EXPECT_FLOAT_EQ(r.output[i], 3.0f);
  for (Index c = 0; c < 2; ++c)
    for (Index z = 0; z < 2; ++z)
      for (Index y = 0; y < 2; ++y)
        for (Index xx = 0; xx < 2; ++xx)
          EXPECT_EQ(r.switches[static_cast<std::size_t>(r.output.offset(0, c, z, y, xx))], x.offset(0, c, 2 * z, 2 * y, 2 * xx));
}

TEST(MaxPool3d, OddDimensionIsShapeError) {
  Tensor5<float> x(1, 1, 2, 3, 2);
  EXPECT_THROW(maxpool3d(x), ShapeError);
}

TEST(MaxPool3d, BackwardRoutesOneNonzeroPerWindow) {
  auto x = random_tensor({2, 2, 4, 6, 2}, 9);
  auto r = maxpool3d(x);
  Tensor5<double> g(r.output.shape(), 1.0);
  auto dx = maxpool3d_backward(x.shape(), r.switches, g);
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 2; ++c)
      for (Index z = 0; z < 2; ++z)
        for (Index y = 0; y < 3; ++y) {
          int nonzero = 0;
          for (Index dz = 0; dz < 2; ++dz)
            for (Index dy = 0; dy < 2; ++dy)
              for (Index dx_ = 0; dx_ < 2; ++dx_) nonzero += dx(n, c, 2 * z + dz, 2 * y + dy, dx_) != 0.0;
          EXPECT_EQ(nonzero, 1);
        }
}

TEST(Relu, Values) {
  Tensor5<float> x(Shape5{1, 1, 1, 1, 3}, std::vector<float>{-1.0f, 0.0f, 2.0f});
  auto y = relu(x);
  EXPECT_EQ(y.vec(), (std::vector<float>{0.0f, 0.0f, 2.0f}));
  Tensor5<float> neg(1, 2, 2, 2, 2, -0.5f);
  for (float v : relu(neg).vec()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, TrainModeStandardizesPerChannel) {
  auto x = random_tensor({3, 2, 4, 4, 4}, 3, -2.0, 5.0);
  std::vector<double> g{1, 1}, b{0, 0}, rm{0, 0}, rv{1, 1};
  auto y = batchnorm(x, BatchNormState<double>{g, b, rm, rv}, Mode::train);
  for (Index c = 0; c < 2; ++c) {
    double s = 0, sq = 0;
    for (Index n = 0; n < 3; ++n)
      for (double v : y.plane(n, c)) {
        s += v;
        sq += v * v;
      }
    EXPECT_NEAR(s / 192.0, 0.0, 1e-12);
    EXPECT_NEAR(sq / 192.0, 1.0, 1e-4);
  }
  EXPECT_NE(rm[0], 0.0);  // running statistics moved
}

TEST(BatchNorm, InferModeWithUnitStatisticsIsIdentity) {
  auto x = random_tensor({2, 3, 2, 2, 2}, 4);
  std::vector<double> g(3, 1), b(3, 0), rm(3, 0), rv(3, 1);
  auto y = batchnorm(x, BatchNormState<double>{g, b, rm, rv}, Mode::infer);
  EXPECT_LE(max_abs_diff(x, y), 1e-5);
}

TEST(BatchNorm, ChannelMismatch) {
  Tensor5<double> x(1, 2, 2, 2, 2);
  std::vector<double> g(3, 1), b(3, 0), rm(3, 0), rv(3, 1);
  EXPECT_THROW(batchnorm(x, BatchNormState<double>{g, b, rm, rv}, Mode::train), ShapeError);
}

TEST(Softmax, KnownValues) {
  Tensor5<double> eq(Shape5{1, 2, 1, 1, 1}, std::vector<double>{0.3, 0.3});
  auto p = softmax_channels(eq);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  Tensor5<double> l(Shape5{1, 2, 1, 1, 1}, std::vector<double>{0.0, std::log(3.0)});
  auto q = softmax_channels(l);
  EXPECT_NEAR(q[0], 0.25, 1e-15);
  EXPECT_NEAR(q[1], 0.75, 1e-15);
}

TEST(Softmax, ShiftInvarianceAndNormalization) {
  auto x = random_tensor({2, 4, 3, 3, 3}, 11, -5.0, 5.0);
  auto shifted = x;
  auto shift = random_tensor({1, 1, 3, 3, 3}, 12, -50.0, 50.0);
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 4; ++c)
      for (Index i = 0; i < 27; ++i) shifted.plane(n, c)[i] += shift[i];
  auto p = softmax_channels(x), q = softmax_channels(shifted);
  EXPECT_LE(max_abs_diff(p, q), 1e-6);
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 27; ++i) {
      double s = 0;
      for (Index c = 0; c < 4; ++c) {
        const double v = p.plane(n, c)[i];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Concat, SlicesRecoverable) {
  auto a = random_tensor({2, 1, 2, 3, 2}, 1), b = random_tensor({2, 1, 2, 3, 2}, 2);
  auto c = concat_channels(a, b);
  EXPECT_EQ(c.c(), 2);
  EXPECT_EQ(slice_channels(c, 0, 1), a);
  EXPECT_EQ(slice_channels(c, 1, 1), b);
  Tensor5<double> none(Shape5{2, 0, 2, 3, 2});
  EXPECT_EQ(concat_channels(a, none), a);
  EXPECT_THROW(concat_channels(a, random_tensor({2, 1, 2, 3, 4}, 3)), ShapeError);
}

TEST(CenterCrop, OffsetsAndIdentity) {
  Tensor5<double> x(1, 1, 6, 6, 6);
  std::iota(x.vec().begin(), x.vec().end(), 0.0);
  auto y = center_crop(x, {4, 4, 4});
  EXPECT_EQ(y(0, 0, 0, 0, 0), x(0, 0, 1, 1, 1));
  EXPECT_EQ(y(0, 0, 3, 3, 3), x(0, 0, 4, 4, 4));
  EXPECT_EQ(center_crop(x, {6, 6, 6}), x);
  EXPECT_THROW(center_crop(x, {7, 6, 6}), ShapeError);
  // 64^3 prediction upsampled to 128^3 and cropped back to 64^3.
  Tensor5<float> p(1, 1, 64, 64, 64);
  EXPECT_EQ(center_crop(upsample2x(p, Interp::nearest), {64, 64, 64}).shape(), (Shape5{1, 1, 64, 64, 64}));
}

TEST(Upsample, NearestReplicatesAndConstantsArePreserved) {
  Tensor5<double> x(Shape5{1, 1, 1, 1, 2}, std::vector<double>{3.0, 7.0});
  auto y = upsample2x(x, Interp::nearest);
  ASSERT_EQ(y.shape(), (Shape5{1, 1, 2, 2, 4}));
  EXPECT_EQ((std::vector<double>(y.vec().begin(), y.vec().begin() + 4)), (std::vector<double>{3, 3, 7, 7}));
  Tensor5<double> c(1, 2, 3, 2, 3, 0.7);
  for (auto mode : {Interp::nearest, Interp::trilinear})
    for (double v : upsample2x(c, mode).vec()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(Upsample, TrilinearOnRampMatchesClosedForm) {
  // f(i) = 2 + 3 i along x; interior samples at (o + 0.5)/2 - 0.5 are exact on a linear ramp,
  // edge samples clamp to the first/last voxel.
  const Index L = 5;
  Tensor5<double> x(1, 1, 1, 1, L);
  for (Index i = 0; i < L; ++i) x[i] = 2.0 + 3.0 * static_cast<double>(i);
  auto y = upsample2x(x, Interp::trilinear);
  for (Index o = 0; o < 2 * L; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(L - 1));
    EXPECT_NEAR(y(0, 0, 0, 0, o), 2.0 + 3.0 * src, 1e-12) << "o=" << o;
  }
}

TEST(Downsample, Modes) {
  auto x = random_tensor({1, 2, 4, 6, 2}, 21);
  EXPECT_EQ(downsample(x, 1, DownsampleMode::trilinear), x);
  Tensor5<double> c(1, 1, 2, 2, 2, 4.0);
  for (auto m : {DownsampleMode::trilinear, DownsampleMode::nearest, DownsampleMode::label_majority})
    EXPECT_DOUBLE_EQ(downsample(c, 2, m)[0], 4.0);
  Tensor5<std::uint8_t> lab(Shape5{1, 1, 2, 2, 2}, std::vector<std::uint8_t>{0, 0, 3, 3, 3, 3, 0, 0});
  EXPECT_EQ(downsample(lab, 2, DownsampleMode::label_majority)[0], 3);
  Tensor5<std::uint8_t> tie(Shape5{1, 1, 2, 2, 2}, std::vector<std::uint8_t>{5, 2, 5, 2, 5, 2, 5, 2});
  EXPECT_EQ(downsample(tie, 2, DownsampleMode::label_majority)[0], 2);
  Tensor5<std::uint8_t> bg(Shape5{1, 1, 2, 2, 2}, std::vector<std::uint8_t>{0, 0, 0, 0, 0, 1, 1, 1});
  EXPECT_EQ(downsample(bg, 2, DownsampleMode::label_majority)[0], 0);
  EXPECT_THROW(downsample(x, 4, DownsampleMode::nearest), ShapeError);
}

TEST(Downsample, NearestUndoesNearestUpsample) {
  auto x = random_tensor({2, 3, 3, 1, 4}, 22);
  EXPECT_EQ(downsample(upsample2x(x, Interp::nearest), 2, DownsampleMode::nearest), x);
}

// Finite-difference checks of every gradient transform over 20 seeds.

TEST(Gradients, SingleOpsMatchFiniteDifferences) {
  gradcheck::SuiteOptions o;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (auto r : {gradcheck::detail::check_conv3d(o, seed), gradcheck::detail::check_conv_transpose3d(o, seed),
                   gradcheck::detail::check_maxpool3d(o, seed), gradcheck::detail::check_relu(o, seed),
                   gradcheck::detail::check_batchnorm(o, seed), gradcheck::detail::check_softmax_dice(o, seed),
                   gradcheck::detail::check_resampling(o, seed)})
      EXPECT_LE(r.rel_err, 1e-6 * (r.op == "batchnorm" || r.op == "softmax_dice_loss" ? 10.0 : 1.0))
          << r.op << " seed " << seed;
  }
}

TEST(Gradients, InjectedSignErrorIsDetected) {
  gradcheck::SuiteOptions o;
  o.inject_sign_error = "relu";
  EXPECT_FALSE(gradcheck::detail::check_relu(o, 3).pass());
  EXPECT_TRUE(gradcheck::detail::check_conv3d(o, 3).pass());
}

TEST(Gradients, KinkStraddlingCoordinatesAreSkipped) {
  // |x| has a kink at 0; the pattern is the sign of x.
  std::vector<double> x{1e-9, 0.5};
  gradcheck::detail::SmoothFd fd{[&] { return std::abs(x[0]) + std::abs(x[1]); },
                                 [&] { return std::vector<Index>{x[0] > 0, x[1] > 0}; },
                                 {1, 1}, 1e-6};
  EXPECT_FALSE(fd.at(x, 0).has_value());
  EXPECT_EQ(fd.kinks, 1);
  ASSERT_TRUE(fd.at(x, 1).has_value());
  EXPECT_NEAR(*fd.at(x, 1), 1.0, 1e-9);
  EXPECT_EQ(x[0], 1e-9);
}
