#include <gtest/gtest.h>

#include "tal/ops.hpp"
#include "test_util.hpp"

// Oracle suite for the differentiable primitives: every backward is checked
// against central finite differences in double precision, resize/pad are
// additionally checked with the adjoint identity <Ax, y> == <x, A'y>.

using namespace tal;
using test_util::fd_gradient;
using test_util::probe;
using test_util::random_tensor;

namespace {

constexpr double kFdTol = 1e-6;       // double-precision FD comfortably beats 1e-3
constexpr double kAdjointTol = 1e-12; // exact adjoints up to rounding

}  // namespace

// ---------------------------------------------------------------- affine

TEST(Affine, ForwardMatchesManual) {
  TensorT<double> x({1, 2}, {1.0, 2.0});
  TensorT<double> W({2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  TensorT<double> b({3}, {0.5, -0.5, 0.0});
  TensorT<double> y = affine_fwd(x, W, b);
  EXPECT_DOUBLE_EQ(y[0], 1.0 * 1 + 2.0 * 4 + 0.5);
  EXPECT_DOUBLE_EQ(y[1], 1.0 * 2 + 2.0 * 5 - 0.5);
  EXPECT_DOUBLE_EQ(y[2], 1.0 * 3 + 2.0 * 6 + 0.0);
}

TEST(Affine, BackwardMatchesFiniteDifferences) {
  Rng rng(11);
  TensorT<double> x = random_tensor<double>({3, 4}, rng);
  TensorT<double> W = random_tensor<double>({4, 5}, rng);
  TensorT<double> b = random_tensor<double>({5}, rng);
  TensorT<double> R = random_tensor<double>({3, 5}, rng);

  AffineGrads<double> g = affine_bwd(R, x, W);
  auto scalar = [&] { return probe(affine_fwd(x, W, b), R); };
  EXPECT_LT(rel_error(fd_gradient(x, scalar), g.x), kFdTol);
  EXPECT_LT(rel_error(fd_gradient(W, scalar), g.W), kFdTol);
  EXPECT_LT(rel_error(fd_gradient(b, scalar), g.b), kFdTol);
}

TEST(Affine, ShapeMismatchThrows) {
  TensorT<double> x({1, 2}), W({3, 3}), b({3});
  EXPECT_THROW(affine_fwd(x, W, b), dimension_error);
  TensorT<double> good_w({2, 3});
  TensorT<double> bad_grad({2, 3});
  EXPECT_THROW(affine_bwd(bad_grad, x, good_w), dimension_error);
}

// ----------------------------------------------------------------- conv2d

TEST(Conv2d, OutputDims) {
  EXPECT_EQ(conv_out_dim(16, 3, 2, 1), 8);
  EXPECT_EQ(conv_out_dim(8, 3, 1, 1), 8);
  EXPECT_EQ(conv_out_dim(7, 3, 1, 0), 5);
  EXPECT_EQ(conv_out_dim(28, 3, 2, 1), 14);
}

TEST(Conv2d, IdentityKernelPassesThrough) {
  Rng rng(3);
  TensorT<double> x = random_tensor<double>({2, 3, 5, 5}, rng);
  TensorT<double> K({3, 3, 1, 1});
  for (int f = 0; f < 3; ++f)
    for (int c = 0; c < 3; ++c) K.at4(f, c, 0, 0) = f == c ? 1.0 : 0.0;
  TensorT<double> y = conv2d_fwd(x, K, TensorT<double>{}, 1, 0);
  EXPECT_EQ(max_abs_diff(y, x), 0.0);
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  struct Case {
    int stride, pad;
  };
  for (Case cs : {Case{1, 1}, Case{2, 1}, Case{1, 0}, Case{2, 0}}) {
    Rng rng(100 + cs.stride * 10 + cs.pad);
    TensorT<double> x = random_tensor<double>({2, 2, 6, 6}, rng);
    TensorT<double> K = random_tensor<double>({3, 2, 3, 3}, rng);
    TensorT<double> b = random_tensor<double>({3}, rng);
    TensorT<double> out = conv2d_fwd(x, K, b, cs.stride, cs.pad);
    TensorT<double> R = random_tensor<double>(out.shape, rng);

    ConvGrads<double> g = conv2d_bwd(R, x, K, cs.stride, cs.pad);
    auto scalar = [&] { return probe(conv2d_fwd(x, K, b, cs.stride, cs.pad), R); };
    EXPECT_LT(rel_error(fd_gradient(x, scalar), g.x), kFdTol)
        << "stride " << cs.stride << " pad " << cs.pad;
    EXPECT_LT(rel_error(fd_gradient(K, scalar), g.K), kFdTol);
    EXPECT_LT(rel_error(fd_gradient(b, scalar), g.b), kFdTol);
  }
}

TEST(Conv2d, BiasFreeBackward) {
  Rng rng(7);
  TensorT<double> x = random_tensor<double>({1, 2, 5, 5}, rng);
  TensorT<double> K = random_tensor<double>({2, 2, 3, 3}, rng);
  TensorT<double> out = conv2d_fwd(x, K, TensorT<double>{}, 1, 1);
  TensorT<double> R = random_tensor<double>(out.shape, rng);
  TensorT<double> gx = conv2d_bwd_input(R, K, 5, 5, 1, 1);
  auto scalar = [&] { return probe(conv2d_fwd(x, K, TensorT<double>{}, 1, 1), R); };
  EXPECT_LT(rel_error(fd_gradient(x, scalar), gx), kFdTol);
}

TEST(Conv2d, ArgumentValidation) {
  TensorT<double> x({1, 2, 5, 5});
  TensorT<double> K_even({2, 2, 2, 2});
  EXPECT_THROW(conv2d_fwd(x, K_even, TensorT<double>{}, 1, 0), dimension_error);
  TensorT<double> K_chan({2, 3, 3, 3});
  EXPECT_THROW(conv2d_fwd(x, K_chan, TensorT<double>{}, 1, 0), dimension_error);
  TensorT<double> K({2, 2, 3, 3});
  EXPECT_THROW(conv2d_fwd(x, K, TensorT<double>{}, 0, 0), dimension_error);
  TensorT<double> tiny({1, 2, 2, 2});
  EXPECT_THROW(conv2d_fwd(tiny, K, TensorT<double>{}, 1, 0), dimension_error);
}

// ------------------------------------------------------------------- relu

TEST(Relu, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  // keep pre-activations away from the kink so FD is well-defined
  TensorT<double> x = random_tensor<double>({2, 3, 4, 4}, rng);
  for (std::size_t i = 0; i < x.numel(); ++i)
    if (std::abs(x[i]) < 0.05) x[i] = 0.1;
  TensorT<double> R = random_tensor<double>(x.shape, rng);
  TensorT<double> g = relu_bwd(R, x);
  auto scalar = [&] { return probe(relu_fwd(x), R); };
  EXPECT_LT(rel_error(fd_gradient(x, scalar), g), kFdTol);
}

TEST(Relu, ZeroPreActivationBlocksGradient) {
  TensorT<double> x({1, 1, 1, 3}, {-1.0, 0.0, 2.0});
  TensorT<double> R({1, 1, 1, 3}, {5.0, 5.0, 5.0});
  TensorT<double> g = relu_bwd(R, x);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[2], 5.0);
}

// ---------------------------------------------------------- global avg pool

TEST(GlobalAvgPool, ForwardValueAndBackwardFd) {
  Rng rng(9);
  TensorT<double> x = random_tensor<double>({2, 3, 4, 5}, rng);
  TensorT<double> y = global_avg_pool_fwd(x);
  double manual = 0.0;
  for (int i = 0; i < 20; ++i) manual += x.at4(1, 2, i / 5, i % 5);
  EXPECT_NEAR(y[static_cast<std::size_t>(1) * 3 + 2], manual / 20.0, 1e-12);

  TensorT<double> R = random_tensor<double>({2, 3}, rng);
  TensorT<double> g = global_avg_pool_bwd(R, 4, 5);
  auto scalar = [&] { return probe(global_avg_pool_fwd(x), R); };
  EXPECT_LT(rel_error(fd_gradient(x, scalar), g), kFdTol);
}

// --------------------------------------------------------- bilinear resize

TEST(BilinearResize, SameSizeIsIdentity) {
  Rng rng(21);
  TensorT<double> x = random_tensor<double>({1, 2, 7, 7}, rng);
  EXPECT_EQ(max_abs_diff(bilinear_resize_fwd(x, 7, 7), x), 0.0);
}

TEST(BilinearResize, ReproducesLinearRamps) {
  // corner-aligned bilinear interpolation is exact on a + b*x + c*y
  int H = 6, W = 9;
  TensorT<double> x({1, 1, H, W});
  auto ramp = [](double yy, double xx) { return 0.3 + 0.25 * xx - 0.4 * yy; };
  for (int y = 0; y < H; ++y)
    for (int xx = 0; xx < W; ++xx) x.at4(0, 0, y, xx) = ramp(y, xx);
  for (auto [Ho, Wo] : {std::pair{11, 17}, std::pair{4, 5}}) {
    TensorT<double> y = bilinear_resize_fwd(x, Ho, Wo);
    double sy = static_cast<double>(H - 1) / (Ho - 1);
    double sx = static_cast<double>(W - 1) / (Wo - 1);
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        EXPECT_NEAR(y.at4(0, 0, oy, ox), ramp(oy * sy, ox * sx), 1e-12);
  }
}

TEST(BilinearResize, AdjointIdentity) {
  Rng rng(33);
  for (auto [H, W, Ho, Wo] : {std::tuple{8, 8, 13, 13}, std::tuple{13, 13, 8, 8},
                              std::tuple{5, 9, 9, 4}, std::tuple{1, 1, 6, 6}}) {
    TensorT<double> x = random_tensor<double>({2, 3, H, W}, rng);
    TensorT<double> y = random_tensor<double>({2, 3, Ho, Wo}, rng);
    double lhs = dot(bilinear_resize_fwd(x, Ho, Wo), y);
    double rhs = dot(x, bilinear_resize_bwd(y, H, W));
    EXPECT_LT(rel_error(lhs, rhs), kAdjointTol) << H << "x" << W << " -> " << Ho << "x" << Wo;
  }
}

TEST(BilinearResize, BackwardMatchesFiniteDifferences) {
  Rng rng(34);
  TensorT<double> x = random_tensor<double>({1, 2, 6, 6}, rng);
  TensorT<double> R = random_tensor<double>({1, 2, 9, 9}, rng);
  TensorT<double> g = bilinear_resize_bwd(R, 6, 6);
  auto scalar = [&] { return probe(bilinear_resize_fwd(x, 9, 9), R); };
  EXPECT_LT(rel_error(fd_gradient(x, scalar), g), kFdTol);
}

// ------------------------------------------------------------ zero-pad/crop

TEST(Pad, PlacesWindowAndZerosElsewhere) {
  Rng rng(41);
  TensorT<double> x = random_tensor<double>({1, 1, 2, 2}, rng);
  TensorT<double> y = pad_fwd(x, 1, 2, 5);
  double sum = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) sum += std::abs(y[i]);
  double xsum = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) xsum += std::abs(x[i]);
  EXPECT_NEAR(sum, xsum, 1e-15);
  EXPECT_EQ(y.at4(0, 0, 1, 2), x.at4(0, 0, 0, 0));
  EXPECT_EQ(y.at4(0, 0, 2, 3), x.at4(0, 0, 1, 1));
  EXPECT_EQ(y.at4(0, 0, 0, 0), 0.0);
}

TEST(Pad, AdjointIdentityAndCrop) {
  Rng rng(42);
  TensorT<double> x = random_tensor<double>({2, 3, 4, 4}, rng);
  TensorT<double> y = random_tensor<double>({2, 3, 7, 7}, rng);
  double lhs = dot(pad_fwd(x, 2, 1, 7), y);
  double rhs = dot(x, pad_bwd(y, 2, 1, 4, 4));
  EXPECT_LT(rel_error(lhs, rhs), kAdjointTol);

  TensorT<double> padded = pad_fwd(x, 3, 0, 7);
  EXPECT_EQ(max_abs_diff(pad_bwd(padded, 3, 0, 4, 4), x), 0.0);
}

TEST(Pad, RejectsOverflowingPlacement) {
  TensorT<double> x({1, 1, 4, 4});
  EXPECT_THROW(pad_fwd(x, 3, 0, 6), dimension_error);
  EXPECT_THROW(pad_fwd(x, -1, 0, 6), dimension_error);
  TensorT<double> g({1, 1, 6, 6});
  EXPECT_THROW(pad_bwd(g, 3, 0, 4, 4), dimension_error);
}

// ------------------------------------------------------- gradient smoothing

TEST(SmoothGradient, InteriorImpulseReplicatesKernel) {
  TensorT<double> g({1, 1, 9, 9});
  g.at4(0, 0, 4, 4) = 1.0;
  TensorT<double> kern = gaussian_kernel<double>(3, 1.0);
  TensorT<double> out = smooth_gradient(g, kern);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx)
      EXPECT_NEAR(out.at4(0, 0, 4 + dy, 4 + dx),
                  kern[static_cast<std::size_t>(1 - dy) * 3 + (1 - dx)], 1e-15);
  EXPECT_EQ(out.at4(0, 0, 0, 0), 0.0);
}

TEST(SmoothGradient, ConstantFieldIsInvariant) {
  TensorT<double> g({1, 2, 6, 6});
  g.fill(0.7);
  TensorT<double> out = smooth_gradient(g, gaussian_kernel<double>(5, 1.5));
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], 0.7, 1e-12);
}

TEST(SmoothGradient, UnitKernelIsBitwiseIdentity) {
  Rng rng(55);
  TensorT<double> g = random_tensor<double>({1, 3, 5, 5}, rng);
  TensorT<double> out = smooth_gradient(g, gaussian_kernel<double>(1, 1.5));
  EXPECT_EQ(max_abs_diff(out, g), 0.0);
}

TEST(SmoothGradient, MatchesNaiveReference) {
  Rng rng(56);
  TensorT<double> g = random_tensor<double>({2, 2, 5, 7}, rng);
  TensorT<double> kern = random_tensor<double>({3, 3}, rng);
  TensorT<double> out = smooth_gradient(g, kern);
  auto reflect = [](int i, int n) {
    if (i < 0) return -i - 1;
    if (i >= n) return 2 * n - i - 1;
    return i;
  };
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 7; ++x) {
          double acc = 0.0;
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              acc += g.at4(b, c, reflect(y + ky - 1, 5), reflect(x + kx - 1, 7)) *
                     kern[static_cast<std::size_t>(ky) * 3 + kx];
          EXPECT_NEAR(out.at4(b, c, y, x), acc, 1e-14);
        }
}

TEST(SmoothGradient, RejectsEvenKernel) {
  TensorT<double> g({1, 1, 4, 4});
  TensorT<double> kern({2, 2});
  EXPECT_THROW(smooth_gradient(g, kern), parameter_error);
}

TEST(GaussianKernel, NormalizedAndSymmetric) {
  TensorT<double> k = gaussian_kernel<double>(5, 1.5);
  double sum = 0.0;
  for (std::size_t i = 0; i < k.numel(); ++i) sum += k[i];
  EXPECT_NEAR(sum, 1.0, 1e-12);
  // closed form up to normalization: k(y,x) proportional to exp(-(dy^2+dx^2)/(2 sigma^2))
  double ratio = k[0] / k[static_cast<std::size_t>(2) * 5 + 2];
  EXPECT_NEAR(ratio, std::exp(-(4.0 + 4.0) / (2.0 * 1.5 * 1.5)), 1e-12);
  EXPECT_NEAR(k[1], k[static_cast<std::size_t>(1) * 5 + 0], 1e-15);
  EXPECT_THROW(gaussian_kernel<double>(4, 1.0), parameter_error);
  TensorT<double> unit = gaussian_kernel<double>(1, 1.0);
  EXPECT_EQ(unit[0], 1.0);
}

// ------------------------------------------------------------- small helpers

TEST(TensorHelpers, SignAndNorms) {
  EXPECT_EQ(sign_of(3.5), 1.0);
  EXPECT_EQ(sign_of(-0.01), -1.0);
  EXPECT_EQ(sign_of(0.0), 0.0);
  EXPECT_EQ(sign_of(-0.0), 0.0);
  TensorT<double> a({3}, {3.0, -4.0, 0.0});
  EXPECT_NEAR(norm2(a), 5.0, 1e-15);
  EXPECT_NEAR(norm1(a), 7.0, 1e-15);
}

TEST(TensorHelpers, ConstructionGuards) {
  EXPECT_THROW(TensorT<float>({2, 0}), dimension_error);
  EXPECT_THROW(TensorT<float>({2, 2}, {1.0f}), dimension_error);
  TensorT<float> a({2, 2});
  TensorT<float> b({4});
  EXPECT_THROW(check_same_shape(a, b, "test"), dimension_error);
}
