#include <gtest/gtest.h>

#include <random>

#include "support/testing.hpp"
#include "xrestormer/model.hpp"

namespace xrestormer {
namespace {

using testing::random_tensor;

ModelConfig small_config() {
  ModelConfig c = ModelConfig::tiny();
  c.channels = {4, 8, 16, 32};
  c.heads = {1, 2, 2, 4};
  c.window = 4;
  return c;
}

TEST(ParameterCount, FullConfiguration) {
  EXPECT_EQ(count_parameters(ModelConfig::full()), 26052368u);
}

TEST(ParameterCount, EnumerationMatchesClosedForm) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 12; ++trial) {
    ModelConfig c;
    const std::size_t c0 = 2 * (rng() % 4 + 1) * 2;
    c.channels = {c0, 2 * c0, 4 * c0, 8 * c0};
    c.heads = {1, 2, 2, 4};
    for (auto& b : c.blocks_per_level) b = rng() % 3;
    c.refinement_pairs = rng() % 3;
    c.window = 4 * (rng() % 2 + 1);
    c.overlap = (rng() % 2) ? 0.5 : 0.0;
    c.oca_head_dim = rng() % 2 ? 0 : 4;
    c.ffn_expansion = (rng() % 2) ? 2.66 : 2.0;
    c.ssab_enabled = rng() % 2;
    auto m = build_model<float>(c, trial);
    EXPECT_EQ(m.params.element_count(), count_parameters(c)) << "trial " << trial;
  }
}

TEST(ParameterCount, AblationReplacesSpatialBlocks) {
  ModelConfig c = small_config();
  c.ssab_enabled = false;
  auto m = build_model<double>(c, 1);
  for (const auto& [name, _] : m.params.entries()) {
    EXPECT_EQ(name.find(".ssab."), std::string::npos) << name;
  }
  EXPECT_TRUE(m.params.contains("latent.0.tsab2.attn.temperature"));
  EXPECT_EQ(m.params.element_count(), count_parameters(c));
}

TEST(BuildModel, SameSeedSameWeightsDifferentSeedDiffers) {
  auto a = build_model<float>(small_config(), 9);
  auto b = build_model<float>(small_config(), 9);
  auto c = build_model<float>(small_config(), 10);
  ASSERT_EQ(a.params.size(), b.params.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params.entries()[i].second.to_vector(), b.params.entries()[i].second.to_vector());
    differs = differs || a.params.entries()[i].second.to_vector() != c.params.entries()[i].second.to_vector();
  }
  EXPECT_TRUE(differs);
}

TEST(BuildModel, InitialisationStatistics) {
  auto m = build_model<double>(ModelConfig::tiny(), 4);
  for (const auto& [name, t] : m.params.entries()) {
    if (name.ends_with("temperature")) {
      for (double v : t.data()) EXPECT_EQ(v, 1.0);
    } else if (name.ends_with("norm1.weight") || name.ends_with("norm2.weight")) {
      for (double v : t.data()) EXPECT_EQ(v, 1.0);
    } else if (name.ends_with(".bias")) {
      for (double v : t.data()) EXPECT_EQ(v, 0.0);
    } else {
      for (double v : t.data()) EXPECT_LE(std::abs(v), 0.04) << name;
    }
  }
}

TEST(ModelConfig, ValidationErrors) {
  ModelConfig c = ModelConfig::tiny();
  c.channels = {8, 16, 30, 64};
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.heads = {3, 2, 4, 8};
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.overlap = 0.3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.blocks_per_level = {1, 1, 1};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_task_mode("sr3"), ConfigError);
  EXPECT_EQ(parse_task_mode("sr2"), (TaskMode{Task::sr, 2}));
  EXPECT_EQ(to_string(parse_task_mode("all-in-one")), "all-in-one");
}

TEST(Forward, PreservesShapeForAwkwardSizes) {
  auto m = build_model<float>(ModelConfig::tiny(), 2);
  NoGradGuard guard;
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{64, 64}, {70, 66}, {33, 47}, {8, 8}}) {
    auto x = random_tensor<float>({1, 3, h, w}, h * w, 0, 1);
    auto y = forward(m, x);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_TRUE(all_finite(y));
  }
}

TEST(Forward, ZeroedProjectionsGiveIdentity) {
  auto m = build_model<double>(ModelConfig::tiny(), 5);
  zero_output_projections(m);
  auto x = random_tensor({2, 3, 17, 24}, 1, 0, 1);
  auto y = forward(m, x);
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST(Forward, BatchElementsAreIndependent) {
  auto m = build_model<double>(small_config(), 6);
  NoGradGuard guard;
  auto a = random_tensor({1, 3, 16, 16}, 1, 0, 1);
  auto b = random_tensor({1, 3, 16, 16}, 2, 0, 1);
  auto both = forward(m, concat<double>({a, b}, 0));
  auto ya = forward(m, a);
  auto yb = forward(m, b);
  auto sa = slice(both, 0, 0, 1), sb = slice(both, 0, 1, 2);
  for (std::size_t i = 0; i < ya.numel(); ++i) {
    EXPECT_NEAR(sa.data()[i], ya.data()[i], 1e-12);
    EXPECT_NEAR(sb.data()[i], yb.data()[i], 1e-12);
  }
}

TEST(Forward, DeterministicAcrossCalls) {
  auto m = build_model<float>(ModelConfig::tiny(), 7);
  NoGradGuard guard;
  auto x = random_tensor<float>({1, 3, 24, 24}, 3, 0, 1);
  EXPECT_EQ(forward(m, x).to_vector(), forward(m, x).to_vector());
}

TEST(Forward, Errors) {
  auto m = build_model<float>(ModelConfig::tiny(), 7);
  Tensor<float> bad({1, 3, 16, 16}, 0.5f);
  bad.set({0, 1, 3, 3}, std::nanf(""));
  EXPECT_THROW(forward(m, bad), NumericError);
  EXPECT_THROW(forward(m, Tensor<float>({1, 1, 16, 16})), ShapeError);
  EXPECT_THROW(forward(m, Tensor<float>({1, 3, 4, 16})), ContractError);
  EXPECT_THROW(restore_sr(m, Tensor<float>({1, 3, 8, 8}), 2), ContractError);
}

TEST(RestoreSr, UpsamplesByConfiguredScale) {
  ModelConfig c = ModelConfig::tiny();
  c.task_mode = {Task::sr, 2};
  auto m = build_model<float>(c, 1);
  NoGradGuard guard;
  auto y = restore_sr(m, random_tensor<float>({1, 3, 12, 10}, 1, 0, 1), 2);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 24, 20}));
  EXPECT_THROW(restore_sr(m, Tensor<float>({1, 3, 12, 10}), 4), ContractError);
}

TEST(RestoreSr, EqualsResizeThenForward) {
  ModelConfig c = ModelConfig::tiny();
  c.task_mode = {Task::sr, 4};
  auto m = build_model<float>(c, 3);
  NoGradGuard guard;
  auto lr = random_tensor<float>({1, 3, 16, 16}, 2, 0, 1);
  auto y = restore_sr(m, lr, 4);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 64, 64}));
  EXPECT_EQ(y.to_vector(), forward(m, bilinear_resize(lr, 64, 64)).to_vector());
  auto up = bilinear_resize(Tensor<float>({1, 3, 16, 16}, 0.25f), 64, 64);
  for (float v : up.data()) EXPECT_EQ(v, 0.25f);
}

TEST(Gradients, ReachEveryParameter) {
  auto m = build_model<double>(small_config(), 8);
  auto x = random_tensor({1, 3, 16, 16}, 4, 0, 1);
  backward(mean(abs(sub(forward(m, x), random_tensor({1, 3, 16, 16}, 5, 0, 1)))));
  for (const auto& [name, t] : m.params.entries()) {
    EXPECT_TRUE(t.has_grad()) << name;
    EXPECT_TRUE(all_finite(t.grad())) << name;
  }
}

TEST(Gradients, WholeNetworkFiniteDifference) {
  ModelConfig c = small_config();
  c.blocks_per_level = {1, 0, 0, 1};
  c.refinement_pairs = 0;
  auto m = build_model<double>(c, 11);
  auto x = random_tensor({1, 3, 8, 8}, 6, 0, 1);
  std::vector<Tensor<double>> leaves{m.params.at("patch_embed.weight"),
                                     m.params.at("latent.0.ssab.attn.position_bias"),
                                     m.params.at("encoder1.0.tsab.attn.temperature"), m.output};
  auto r = testing::gradcheck([&] { return forward(m, x); }, leaves, 3, 16);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GT(r.checked, 20u);
}

TEST(CloneModel, CopiesAreIndependent) {
  auto m = build_model<float>(ModelConfig::tiny(), 2);
  m.step = 17;
  auto c = clone_model(m);
  EXPECT_EQ(c.step, 17u);
  EXPECT_EQ(c.params.at("output.weight").to_vector(), m.params.at("output.weight").to_vector());
  auto w = m.params.at("output.weight");
  w.data()[0] += 1.0f;
  EXPECT_NE(c.params.at("output.weight").to_vector(), m.params.at("output.weight").to_vector());
}

TEST(ParameterCount, EnumerationOfFullModel) {
  std::size_t total = 0;
  for (const auto& [name, shape] : enumerate_parameters(ModelConfig::full())) total += numel(shape);
  EXPECT_EQ(total, count_parameters(ModelConfig::full()));
  auto random = build_model<float>(small_config(), 1);
  auto shapes = enumerate_parameters(small_config());
  ASSERT_EQ(shapes.size(), random.params.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    EXPECT_EQ(shapes[i].first, random.params.entries()[i].first);
    EXPECT_EQ(shapes[i].second, random.params.entries()[i].second.shape());
  }
}

}  // namespace
}  // namespace xrestormer
