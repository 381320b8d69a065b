#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "support/testing.hpp"
#include "xrestormer/attention.hpp"

namespace xrestormer {
namespace {

using testing::gradcheck;
using testing::random_tensor;

// Deterministic "hand-set" weights: 0.3 * sin(1.7 * i + phase).
Tensor<double> scripted(Shape shape, double phase) {
  Tensor<double> t(std::move(shape));
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.3 * std::sin(1.7 * static_cast<double>(i) + phase);
  return t;
}

void zero(Tensor<double>& t) {
  for (auto& v : t.data()) v = 0.0;
}

double gelu_ref(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

// Reflect index for the 3x3 depthwise halo.
std::size_t refl(long long i, long long n) {
  if (i < 0) return static_cast<std::size_t>(-i);
  if (i >= n) return static_cast<std::size_t>(2 * (n - 1) - i);
  return static_cast<std::size_t>(i);
}

using Plane = std::vector<std::vector<double>>;  // [channel][pixel]

Plane pointwise_ref(const Tensor<double>& w, const Plane& x) {
  const std::size_t out = w.dim(0), in = w.dim(1), P = x[0].size();
  Plane y(out, std::vector<double>(P, 0.0));
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t p = 0; p < P; ++p) y[o][p] += w.at({o, i, 0, 0}) * x[i][p];
  return y;
}

Plane depthwise_ref(const Tensor<double>& w, const Plane& x, std::size_t H, std::size_t W) {
  Plane y(x.size(), std::vector<double>(H * W, 0.0));
  for (std::size_t c = 0; c < x.size(); ++c)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t col = 0; col < W; ++col) {
        double acc = 0;
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::size_t rr = refl(static_cast<long long>(r + ky) - 1, H);
            const std::size_t cc = refl(static_cast<long long>(col + kx) - 1, W);
            acc += w.at({c, 0, ky, kx}) * x[c][rr * W + cc];
          }
        y[c][r * W + col] = acc;
      }
  return y;
}

Plane to_plane(const Tensor<double>& x) {
  const std::size_t C = x.dim(1), P = x.dim(2) * x.dim(3);
  Plane p(C, std::vector<double>(P));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < P; ++i) p[c][i] = x.data()[c * P + i];
  return p;
}

// Straight-line MDTA for a single image.
Plane mdta_ref(const Plane& x, const MdtaParams<double>& p, std::size_t H, std::size_t W) {
  const std::size_t C = x.size(), P = H * W, heads = p.heads, c = C / heads;
  Plane qkv = depthwise_ref(p.qkv_dwconv, pointwise_ref(p.qkv, x), H, W);
  auto unit = [&](std::vector<double> v) {
    double n = 0;
    for (double e : v) n += e * e;
    n = std::sqrt(n);
    for (double& e : v) e /= n;
    return v;
  };
  Plane o(C, std::vector<double>(P, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < c; ++i) {
      const auto q = unit(qkv[h * c + i]);
      std::vector<double> logits(c);
      for (std::size_t j = 0; j < c; ++j) {
        const auto k = unit(qkv[C + h * c + j]);
        double dot = 0;
        for (std::size_t t = 0; t < P; ++t) dot += q[t] * k[t];
        logits[j] = dot * p.temperature.data()[h];
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t t = 0; t < P; ++t) o[h * c + i][t] += logits[j] / z * qkv[2 * C + h * c + j][t];
    }
  }
  return pointwise_ref(p.project_out, o);
}

// Window attention where key/value windows are enlarged by `margin` on each
// side (zero outside the image) and a relative-offset bias is added.
Plane window_attention_ref(const Plane& x, const OcaParams<double>& p, std::size_t H, std::size_t W) {
  const std::size_t M = p.window, margin = static_cast<std::size_t>(std::lround(p.overlap * M)) / 2;
  const std::size_t big = M + 2 * margin, span = M + big - 1;
  const std::size_t heads = p.heads, d = p.head_dim, inner = heads * d;
  Plane qkv = pointwise_ref(p.qkv, x);
  Plane o(inner, std::vector<double>(H * W, 0.0));
  for (std::size_t wy = 0; wy < H / M; ++wy)
    for (std::size_t wx = 0; wx < W / M; ++wx)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < M; ++j) {
            const std::size_t qpix = (wy * M + i) * W + wx * M + j;
            std::vector<double> logits, vals_idx;
            std::vector<long long> kpix;
            for (std::size_t a = 0; a < big; ++a)
              for (std::size_t b = 0; b < big; ++b) {
                const long long y = static_cast<long long>(wy * M + a) - static_cast<long long>(margin);
                const long long xx = static_cast<long long>(wx * M + b) - static_cast<long long>(margin);
                const bool inside = y >= 0 && xx >= 0 && y < static_cast<long long>(H) && xx < static_cast<long long>(W);
                const long long pix = inside ? y * static_cast<long long>(W) + xx : -1;
                double dot = 0;
                for (std::size_t e = 0; e < d; ++e) {
                  const double kv = pix < 0 ? 0.0 : qkv[inner + h * d + e][static_cast<std::size_t>(pix)];
                  dot += qkv[h * d + e][qpix] * kv;
                }
                const std::size_t rel = (a + M - 1 - i) * span + (b + M - 1 - j);
                logits.push_back(dot / std::sqrt(static_cast<double>(d)) + p.position_bias.at({rel, h}));
                kpix.push_back(pix);
              }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0;
            for (auto& l : logits) z += (l = std::exp(l - mx));
            for (std::size_t t = 0; t < logits.size(); ++t) {
              if (kpix[t] < 0) continue;
              for (std::size_t e = 0; e < d; ++e)
                o[h * d + e][qpix] += logits[t] / z * qkv[2 * inner + h * d + e][static_cast<std::size_t>(kpix[t])];
            }
          }
  return pointwise_ref(p.project_out, o);
}

Plane gdfn_ref(const Plane& x, const GdfnParams<double>& p, std::size_t H, std::size_t W) {
  Plane y = depthwise_ref(p.dwconv, pointwise_ref(p.project_in, x), H, W);
  Plane g(p.hidden, std::vector<double>(H * W));
  for (std::size_t c = 0; c < p.hidden; ++c)
    for (std::size_t t = 0; t < H * W; ++t) g[c][t] = gelu_ref(y[c][t]) * y[p.hidden + c][t];
  return pointwise_ref(p.project_out, g);
}

void expect_plane_near(const Tensor<double>& got, const Plane& want, double tol) {
  const std::size_t P = want[0].size();
  ASSERT_EQ(got.numel(), want.size() * P);
  for (std::size_t c = 0; c < want.size(); ++c)
    for (std::size_t t = 0; t < P; ++t) EXPECT_NEAR(got.data()[c * P + t], want[c][t], tol) << c << "," << t;
}

void expect_rows_sum_to_one(const Tensor<double>& attn, double tol) {
  const std::size_t len = attn.shape().back();
  for (std::size_t r = 0; r < attn.numel() / len; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < len; ++j) s += attn.data()[r * len + j];
    ASSERT_NEAR(s, 1.0, tol);
  }
}

TEST(Mdta, AttentionMatrixIsChannelByChannel) {
  ParameterSet<double> ps;
  Initializer<double> init(1);
  auto p = make_mdta(ps, init, "attn", 48, 1);
  Tensor<double> attn;
  auto x = random_tensor({1, 48, 8, 8}, 2);
  auto y = mdta_forward(x, p, &attn);
  EXPECT_EQ(attn.shape(), (Shape{1, 1, 48, 48}));
  EXPECT_EQ(y.shape(), x.shape());
  expect_rows_sum_to_one(attn, 1e-6);
}

TEST(Mdta, MatchesScriptedOracle) {
  MdtaParams<double> p;
  p.heads = 2;
  p.temperature = Tensor<double>({2, 1, 1}, {0.8, 1.3});
  p.qkv = scripted({12, 4, 1, 1}, 0.1);
  p.qkv_dwconv = scripted({12, 1, 3, 3}, 0.7);
  p.project_out = scripted({4, 4, 1, 1}, 1.9);
  auto x = scripted({1, 4, 2, 2}, 2.5);
  expect_plane_near(mdta_forward(x, p), mdta_ref(to_plane(x), p, 2, 2), 1e-10);
}

TEST(Mdta, IndivisibleHeadsIsConfigError) {
  ParameterSet<double> ps;
  Initializer<double> init(1);
  EXPECT_THROW(make_mdta(ps, init, "a", 6, 4), ConfigError);
}

TEST(Mdta, SpatialMixingBreaksPermutationEquivariance) {
  // With centre-only depthwise kernels every step is per-pixel or a sum over
  // pixels, so permuting pixels commutes with MDTA. Real 3x3 kernels mix
  // neighbours and must break this.
  ParameterSet<double> ps;
  Initializer<double> init(3, 0.2);
  auto p = make_mdta(ps, init, "attn", 8, 2);
  const std::size_t H = 4, W = 4, P = H * W;
  std::vector<std::size_t> perm(P);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(9));
  auto permute_pixels = [&](const Tensor<double>& t) {
    Tensor<double> out(t.shape());
    for (std::size_t c = 0; c < t.dim(1); ++c)
      for (std::size_t i = 0; i < P; ++i) out.data()[c * P + i] = t.data()[c * P + perm[i]];
    return out;
  };
  auto x = random_tensor({1, 8, H, W}, 4);
  auto max_gap = [&] {
    auto a = mdta_forward(permute_pixels(x), p);
    auto b = permute_pixels(mdta_forward(x, p));
    double gap = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) gap = std::max(gap, std::abs(a.data()[i] - b.data()[i]));
    return gap;
  };
  EXPECT_GT(max_gap(), 1e-6);
  auto dw = p.qkv_dwconv.data();
  for (std::size_t i = 0; i < dw.size(); ++i) {
    if (i % 9 != 4) dw[i] = 0.0;
  }
  EXPECT_LT(max_gap(), 1e-12);
}

TEST(Oca, AttentionExtentAndNormalisation) {
  ParameterSet<double> ps;
  Initializer<double> init(5);
  auto p = make_oca(ps, init, "attn", 8, 2, 4, 8, 0.5);
  EXPECT_EQ(p.position_bias.shape(), (Shape{19 * 19, 2}));
  Tensor<double> attn;
  auto x = random_tensor({1, 8, 16, 16}, 6);
  auto y = oca_forward(x, p, &attn);
  EXPECT_EQ(attn.shape(), (Shape{4, 2, 64, 144}));
  EXPECT_EQ(y.shape(), x.shape());
  expect_rows_sum_to_one(attn, 1e-6);
}

TEST(Oca, ZeroOverlapZeroBiasIsPlainWindowAttention) {
  ParameterSet<double> ps;
  Initializer<double> init(7, 0.3);
  auto p = make_oca(ps, init, "attn", 4, 2, 2, 4, 0.0);
  zero(p.position_bias);
  auto x = random_tensor({1, 4, 8, 8}, 8);
  expect_plane_near(oca_forward(x, p), window_attention_ref(to_plane(x), p, 8, 8), 1e-10);
}

TEST(Oca, OverlappingWindowsWithBiasMatchOracle) {
  ParameterSet<double> ps;
  Initializer<double> init(9, 0.3);
  auto p = make_oca(ps, init, "attn", 4, 2, 3, 4, 0.5);
  auto x = random_tensor({1, 4, 8, 12}, 10);
  expect_plane_near(oca_forward(x, p), window_attention_ref(to_plane(x), p, 8, 12), 1e-10);
}

TEST(Oca, IndivisibleExtentIsContractError) {
  ParameterSet<double> ps;
  Initializer<double> init(1);
  auto p = make_oca(ps, init, "attn", 4, 1, 4, 8, 0.5);
  EXPECT_THROW(oca_forward(random_tensor({1, 4, 12, 16}, 1), p), ContractError);
  EXPECT_THROW(make_oca(ps, init, "bad", 4, 1, 4, 8, 0.3), ConfigError);
}

TEST(Gdfn, HiddenWidthTruncates) {
  EXPECT_EQ(gdfn_hidden(48, 2.66), 127u);
  EXPECT_EQ(gdfn_hidden(96, 2.66), 255u);
}

TEST(Gdfn, ZeroGateGivesZeroOutput) {
  ParameterSet<double> ps;
  Initializer<double> init(11);
  auto p = make_gdfn(ps, init, "ffn", 6, 2.66);
  auto w = p.project_in.data();
  for (std::size_t i = 0; i < p.hidden * 6; ++i) w[i] = 0.0;  // gate half of project_in
  auto y = gdfn_forward(random_tensor({1, 6, 5, 5}, 12), p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Gdfn, MatchesScriptedOracle) {
  GdfnParams<double> p;
  p.hidden = gdfn_hidden(4, 1.5);
  p.project_in = scripted({12, 4, 1, 1}, 0.4);
  p.dwconv = scripted({12, 1, 3, 3}, 1.1);
  p.project_out = scripted({4, 6, 1, 1}, 2.2);
  auto x = scripted({1, 4, 3, 2}, 0.9);
  expect_plane_near(gdfn_forward(x, p), gdfn_ref(to_plane(x), p, 3, 2), 1e-10);
}

struct Blocks {
  ParameterSet<double> ps;
  TsabParams<double> tsab;
  SsabParams<double> ssab;
  explicit Blocks(std::uint64_t seed, std::size_t channels = 8) {
    Initializer<double> init(seed, 0.2);
    tsab = make_tsab(ps, init, "t", channels, 2, 2.66);
    ssab = make_ssab(ps, init, "s", channels, 2, 4, 8, 0.5, 2.66);
    // non-trivial norm affine so the gradient check covers it
    for (auto& [name, t] : ps.entries()) {
      if (name.find("norm") != std::string::npos) {
        auto tt = t;
        auto d = tt.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += 0.1 * std::sin(static_cast<double>(i + seed));
      }
    }
  }
};

TEST(Blocks, ZeroProjectionsGiveIdentity) {
  Blocks b(13);
  zero(b.tsab.attn.project_out);
  zero(b.tsab.ffn.project_out);
  zero(b.ssab.attn.project_out);
  zero(b.ssab.ffn.project_out);
  for (Shape s : {Shape{1, 8, 16, 16}, Shape{2, 8, 11, 13}}) {
    auto x = random_tensor(s, 14);
    EXPECT_EQ(tsab_forward(x, b.tsab).to_vector(), x.to_vector());
    EXPECT_EQ(ssab_forward(x, b.ssab).to_vector(), x.to_vector());
  }
}

TEST(Blocks, ShapePreservedAndMatchesManualComposition) {
  Blocks b(15);
  for (Shape s : {Shape{1, 8, 16, 8}, Shape{1, 8, 9, 7}}) {
    auto x = random_tensor(s, 16);
    auto t = tsab_forward(x, b.tsab);
    EXPECT_EQ(t.shape(), x.shape());
    auto ft = add(x, mdta_forward(layer_norm(x, b.tsab.norm1), b.tsab.attn));
    auto manual_t = add(ft, gdfn_forward(layer_norm(ft, b.tsab.norm2), b.tsab.ffn));
    EXPECT_EQ(t.to_vector(), manual_t.to_vector());

    auto s_out = ssab_forward(t, b.ssab);
    EXPECT_EQ(s_out.shape(), x.shape());
    const std::size_t ph = (8 - s[2] % 8) % 8, pw = (8 - s[3] % 8) % 8;
    auto normed = pad2d(layer_norm(t, b.ssab.norm1), 0, ph, 0, pw, PadMode::zeros);
    auto fs = add(t, crop2d(oca_forward(normed, b.ssab.attn), 0, 0, s[2], s[3]));
    auto manual_s = add(fs, gdfn_forward(layer_norm(fs, b.ssab.norm2), b.ssab.ffn));
    EXPECT_EQ(s_out.to_vector(), manual_s.to_vector());
  }
}

std::vector<Tensor<double>> all_params(const ParameterSet<double>& ps, const std::string& prefix) {
  std::vector<Tensor<double>> out;
  for (const auto& [name, t] : ps.entries())
    if (name.rfind(prefix, 0) == 0) out.push_back(t);
  return out;
}

TEST(GradCheck, Mdta) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Blocks b(seed);
    auto x = random_tensor({1, 8, 4, 5}, seed + 40);
    auto leaves = all_params(b.ps, "t.attn");
    leaves.push_back(x);
    auto r = gradcheck([&] { return mdta_forward(x, b.tsab.attn); }, leaves, seed, 24);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(GradCheck, Oca) {
  for (std::uint64_t seed : {1, 2, 3}) {
    ParameterSet<double> ps;
    Initializer<double> init(seed, 0.3);
    auto p = make_oca(ps, init, "attn", 4, 2, 3, 4, 0.5);
    auto x = random_tensor({1, 4, 8, 8}, seed + 50);
    auto leaves = all_params(ps, "attn");
    leaves.push_back(x);
    auto r = gradcheck([&] { return oca_forward(x, p); }, leaves, seed, 24);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(GradCheck, Gdfn) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Blocks b(seed);
    auto x = random_tensor({1, 8, 4, 3}, seed + 60);
    auto leaves = all_params(b.ps, "t.ffn");
    leaves.push_back(x);
    auto r = gradcheck([&] { return gdfn_forward(x, b.tsab.ffn); }, leaves, seed, 24);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(GradCheck, TsabAndSsab) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Blocks b(seed);
    auto x = random_tensor({1, 8, 6, 5}, seed + 70);
    std::vector<Tensor<double>> leaves = all_params(b.ps, "");
    leaves.push_back(x);
    auto r = gradcheck([&] { return ssab_forward(tsab_forward(x, b.tsab), b.ssab); }, leaves, seed, 6);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

}  // namespace
}  // namespace xrestormer
