#include <gtest/gtest.h>

#include <iterator>
#include <set>

#include "support/testing.hpp"
#include "xrestormer/nn.hpp"

namespace xrestormer {
namespace {

using testing::gradcheck;
using testing::random_normal;
using testing::random_tensor;

// Direct nested-loop cross-correlation with zero padding handled by bounds checks.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& bias,
                          std::size_t stride, std::size_t pad, std::size_t groups) {
  const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), Cg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  const std::size_t OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  Tensor<double> out({B, Cout, OH, OW});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oc = 0; oc < Cout; ++oc)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double acc = bias.defined() ? bias.data()[oc] : 0.0;
          const std::size_t g = oc / (Cout / groups);
          for (std::size_t ic = 0; ic < Cg; ++ic)
            for (std::size_t ky = 0; ky < KH; ++ky)
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const long long y = static_cast<long long>(oy * stride + ky) - static_cast<long long>(pad);
                const long long xx = static_cast<long long>(ox * stride + kx) - static_cast<long long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long long>(H) || xx >= static_cast<long long>(W)) continue;
                acc += w.at({oc, ic, ky, kx}) *
                       x.at({b, g * Cg + ic, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)});
              }
          out.set({b, oc, oy, ox}, acc);
        }
  return out;
}

TEST(Conv2d, PointwiseIdentity) {
  auto x = random_tensor({1, 3, 5, 4}, 1);
  Tensor<double> w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.set({c, c, 0, 0}, 1.0);
  auto y = conv2d(x, Conv2dParams<double>{w, {}});
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST(Conv2d, DepthwiseOnesOnConstantReflect) {
  Tensor<double> x({1, 4, 6, 6}, 0.3);
  Tensor<double> w({4, 1, 3, 3}, 1.0);
  auto y = conv2d(x, Conv2dParams<double>{w, {}, 1, 1, 4, PadMode::reflect});
  EXPECT_EQ(y.shape(), x.shape());
  for (double v : y.data()) EXPECT_NEAR(v, 9 * 0.3, 1e-15);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  struct Case {
    std::size_t cout, cin, k, stride, pad, groups;
    bool bias;
  };
  for (const Case c : {Case{5, 4, 3, 1, 1, 1, true}, Case{6, 4, 3, 2, 1, 2, false}, Case{4, 4, 3, 1, 1, 4, true},
                       Case{3, 4, 1, 1, 0, 1, false}, Case{2, 4, 2, 2, 0, 1, true}}) {
    auto x = random_tensor({1, c.cin, 6, 6}, 7);
    auto w = random_tensor({c.cout, c.cin / c.groups, c.k, c.k}, 8);
    Tensor<double> b = c.bias ? random_tensor({c.cout}, 9) : Tensor<double>{};
    auto y = conv2d(x, Conv2dParams<double>{w, b, c.stride, c.pad, c.groups});
    auto ref = naive_conv(x, w, b, c.stride, c.pad, c.groups);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], ref.data()[i], 1e-10);
  }
}

TEST(Conv2d, GroupArithmeticErrors) {
  auto x = random_tensor({1, 4, 6, 6}, 1);
  EXPECT_THROW(conv2d(x, Conv2dParams<double>{random_tensor({3, 2, 3, 3}, 2), {}, 1, 1, 2}), ShapeError);
  EXPECT_THROW(conv2d(x, Conv2dParams<double>{random_tensor({4, 3, 3, 3}, 2), {}, 1, 1, 1}), ShapeError);
  EXPECT_THROW(conv2d(random_tensor({1, 4, 2, 2}, 1), Conv2dParams<double>{random_tensor({4, 4, 3, 3}, 2), {}}),
               ShapeError);
}

TEST(Conv2d, GradCheck) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto x = random_tensor({2, 4, 5, 6}, seed);
    auto w = random_tensor({6, 2, 3, 3}, seed + 1);
    auto b = random_tensor({6}, seed + 2);
    auto r = gradcheck([&] { return conv2d(x, Conv2dParams<double>{w, b, 2, 1, 2}); }, {x, w, b}, seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Conv2d, DepthwiseReflectGradCheck) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto x = random_tensor({1, 3, 5, 4}, seed);
    auto w = random_tensor({3, 1, 3, 3}, seed + 1);
    auto r = gradcheck([&] { return conv2d(x, Conv2dParams<double>{w, {}, 1, 1, 3, PadMode::reflect}); }, {x, w},
                       seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Pad2d, ReflectExcludesEdgeAndFoldsSmallAxes) {
  Tensor<double> x({1, 1, 1, 3}, {1, 2, 3});
  auto y = pad2d(x, 0, 0, 2, 2, PadMode::reflect);
  EXPECT_EQ(y.to_vector(), (std::vector<double>{3, 2, 1, 2, 3, 2, 1}));
  auto single = pad2d(Tensor<double>({1, 1, 1, 1}, {5}), 1, 1, 1, 1, PadMode::reflect);
  for (double v : single.data()) EXPECT_EQ(v, 5);
  auto z = pad2d(x, 1, 0, 0, 1, PadMode::zeros);
  EXPECT_EQ(z.to_vector(), (std::vector<double>{0, 0, 0, 0, 1, 2, 3, 0}));
}

LayerNormParams<double> unit_norm(std::size_t c) {
  return {Tensor<double>({c}, 1.0), Tensor<double>({c}, 0.0)};
}

TEST(LayerNorm, ConstantInputGivesZeros) {
  Tensor<double> x({2, 5, 3, 3}, 0.7);
  auto y = layer_norm(x, unit_norm(5));
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(LayerNorm, PerPositionMomentsBothLayouts) {
  auto x = random_normal({2, 16, 3, 4}, 3);
  auto y = layer_norm(x, unit_norm(16));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 12; ++p) {
      double mu = 0, var = 0;
      for (std::size_t c = 0; c < 16; ++c) mu += y.data()[(b * 16 + c) * 12 + p];
      mu /= 16;
      for (std::size_t c = 0; c < 16; ++c) {
        const double d = y.data()[(b * 16 + c) * 12 + p] - mu;
        var += d * d;
      }
      var /= 16;
      EXPECT_LT(std::abs(mu), 1e-6);
      EXPECT_LT(std::abs(var - 1.0), 1e-4);
    }
  auto t = random_normal({2, 12, 16}, 4);
  auto yt = layer_norm(t, unit_norm(16));
  for (std::size_t r = 0; r < 24; ++r) {
    double mu = 0;
    for (std::size_t c = 0; c < 16; ++c) mu += yt.data()[r * 16 + c];
    EXPECT_LT(std::abs(mu / 16), 1e-6);
  }
}

TEST(LayerNorm, AffineOnlyWhenGammaZero) {
  auto x = random_tensor({1, 4, 2, 2}, 5);
  LayerNormParams<double> p{Tensor<double>({4}, 0.0), Tensor<double>({4}, 7.0)};
  auto y = layer_norm(x, p);
  for (double v : y.data()) EXPECT_EQ(v, 7.0);
}

TEST(LayerNorm, Errors) {
  EXPECT_THROW(layer_norm(Tensor<double>({1, 0, 2, 2}), unit_norm(0)), ContractError);
  EXPECT_THROW(layer_norm(random_tensor({1, 4, 2, 2}, 1), unit_norm(3)), ShapeError);
}

TEST(LayerNorm, GradCheck) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto x = random_tensor({2, 5, 3, 2}, seed);
    auto g = random_tensor({5}, seed + 1);
    auto b = random_tensor({5}, seed + 2);
    auto r = gradcheck([&] { return layer_norm(x, LayerNormParams<double>{g, b}); }, {x, g, b}, seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
    auto xt = random_tensor({2, 3, 5}, seed + 3);
    auto rt = gradcheck([&] { return layer_norm(xt, LayerNormParams<double>{g, b}); }, {xt, g, b}, seed);
    EXPECT_LT(rt.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(PixelShuffle, ShapesAndRoundTrip) {
  auto x = random_tensor<float>({1, 3, 8, 8}, 1);
  auto d = pixel_unshuffle(x, 2);
  EXPECT_EQ(d.shape(), (Shape{1, 12, 4, 4}));
  EXPECT_EQ(d.numel(), x.numel());
  EXPECT_EQ(pixel_shuffle(d, 2).to_vector(), x.to_vector());
  // channel c*4 + i*2 + j holds pixel (2h+i, 2w+j)
  EXPECT_EQ(d.at({0, 1 * 4 + 1 * 2 + 0, 2, 3}), x.at({0, 1, 5, 6}));
  EXPECT_THROW(pixel_unshuffle(random_tensor({1, 3, 7, 8}, 1), 2), ShapeError);
  EXPECT_THROW(pixel_shuffle(random_tensor({1, 3, 4, 4}, 1), 2), ShapeError);
}

TEST(WindowPartition, TilesAndRoundTrip) {
  auto x = random_tensor<float>({1, 3, 16, 16}, 2);
  auto w = window_partition(x, 8);
  EXPECT_EQ(w.shape(), (Shape{4, 64, 3}));
  EXPECT_EQ(window_reverse(w, 8, 1, 16, 16).to_vector(), x.to_vector());
  // window 3 is the bottom-right tile; token (i, j) is pixel (8+i, 8+j)
  EXPECT_EQ(w.at({3, 2 * 8 + 5, 1}), x.at({0, 1, 10, 13}));
  EXPECT_EQ(w.at({1, 0, 2}), x.at({0, 2, 0, 8}));
  auto xb = random_tensor({2, 2, 8, 16}, 3);
  EXPECT_EQ(window_reverse(window_partition(xb, 4), 4, 2, 8, 16).to_vector(), xb.to_vector());
  EXPECT_THROW(window_partition(random_tensor({1, 1, 12, 16}, 1), 8), ShapeError);
}

TEST(OverlappingWindows, ShapeAndPadding) {
  EXPECT_EQ(overlap_window_size(8, 0.5), 12u);
  auto x = random_tensor({1, 2, 16, 16}, 4);
  auto w = overlapping_window_partition(x, 8, 0.5);
  EXPECT_EQ(w.shape(), (Shape{4, 144, 2}));
  // window 0 starts at (-2, -2): its first two rows and columns are zero padding
  EXPECT_EQ(w.at({0, 0, 0}), 0.0);
  EXPECT_EQ(w.at({0, 1 * 12 + 5, 1}), 0.0);
  EXPECT_EQ(w.at({0, 2 * 12 + 2, 1}), x.at({0, 1, 0, 0}));
}

TEST(OverlappingWindows, ZeroOverlapIsPlainPartition) {
  auto x = random_tensor({2, 3, 16, 8}, 5);
  EXPECT_EQ(overlapping_window_partition(x, 4, 0.0).to_vector(), window_partition(x, 4).to_vector());
}

TEST(OverlappingWindows, AdjacentWindowsShareFourColumns) {
  // Enumerate source columns covered by horizontally adjacent windows 0 and 1.
  Tensor<double> x({1, 1, 8, 16});
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t c = 0; c < 16; ++c) x.set({0, 0, y, c}, static_cast<double>(c + 1));
  auto w = overlapping_window_partition(x, 8, 0.5);
  std::set<double> left, right;
  for (std::size_t j = 0; j < 12; ++j) {
    if (double v = w.at({0, 5 * 12 + j, 0}); v != 0) left.insert(v);
    if (double v = w.at({1, 5 * 12 + j, 0}); v != 0) right.insert(v);
  }
  std::vector<double> shared;
  std::set_intersection(left.begin(), left.end(), right.begin(), right.end(), std::back_inserter(shared));
  EXPECT_EQ(shared, (std::vector<double>{7, 8, 9, 10}));  // columns 6..9
}

TEST(OverlappingWindows, ConfigErrors) {
  EXPECT_THROW(overlap_window_size(8, 0.3), ConfigError);
  EXPECT_THROW(overlap_window_size(8, 0.125), ConfigError);  // margin 1 is odd
}

TEST(OverlappingWindows, GradCheck) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto x = random_tensor({1, 2, 8, 8}, seed);
    auto r = gradcheck([&] { return overlapping_window_partition(x, 4, 0.5); }, {x}, seed);
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(BilinearResize, ConstantAndIdentity) {
  Tensor<double> c({1, 3, 5, 7}, 0.3);
  for (double s : {0.5, 2.0, 3.0, 4.0}) {
    auto y = bilinear_resize(c, s);
    for (double v : y.data()) EXPECT_NEAR(v, 0.3, 1e-15);
  }
  auto x = random_tensor({1, 2, 6, 5}, 1);
  EXPECT_EQ(bilinear_resize(x, 1.0).to_vector(), x.to_vector());
  EXPECT_THROW(bilinear_resize(x, 0, 4), ContractError);
}

TEST(BilinearResize, TwoByTwoToFourByFour) {
  // Hand evaluation with half-pixel centres: sample positions per axis are
  // -0.25 (clamped to 0), 0.25, 0.75, 1.25 (upper tap clamped), so the
  // interpolation weights along x are {0, 0.25, 0.75, 1} and the bilinear
  // surface through [[0,1],[2,3]] is fx + 2 fy.
  Tensor<double> x({1, 1, 2, 2}, {0, 1, 2, 3});
  auto y = bilinear_resize(x, 4, 4);
  const std::vector<double> expected{0.0, 0.25, 0.75, 1.0,  0.5, 0.75, 1.25, 1.5,
                                     1.5, 1.75, 2.25, 2.5,  2.0, 2.25, 2.75, 3.0};
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y.data()[i], expected[i], 1e-6);
}

TEST(BilinearResize, GradCheck) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto x = random_tensor({1, 2, 3, 4}, seed);
    EXPECT_LT(gradcheck([&] { return bilinear_resize(x, 7, 5); }, {x}, seed).max_rel_error, 1e-4);
  }
}

}  // namespace
}  // namespace xrestormer
