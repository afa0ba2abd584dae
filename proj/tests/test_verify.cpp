#include <cmath>

#include <gtest/gtest.h>

#include "m2former/verify.hpp"

using namespace m2f;

TEST(FiniteDiff, SquareAndSine) {
  Tensor<double> x({3}, std::vector<double>{0.5, -1.0, 2.0});
  auto sq = [](const Tensor<double>& v) {
    double s = 0.0;
    for (double e : v.data()) s += e * e;
    return s;
  };
  const auto g = finite_diff_grad(sq, x, 1e-5);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], 2.0 * x[i], 1e-9);
  auto sines = [](const Tensor<double>& v) { return std::sin(v[0]) + std::sin(v[2]); };
  const auto gs = finite_diff_grad(sines, x, 1e-5, {2});
  EXPECT_NEAR(gs[2], std::cos(2.0), 1e-9);
  EXPECT_EQ(gs[0], 0.0);  // unlisted coordinates stay zero
  EXPECT_THROW(finite_diff_grad(sines, x, 1e-5, {3}), IndexError);
}

TEST(FiniteDiff, NonFiniteFunctionIsAnOracleError) {
  Tensor<double> x({1}, std::vector<double>{0.0});
  auto f = [](const Tensor<double>& v) { return std::log(v[0]); };  // NaN at -eps
  EXPECT_THROW(finite_diff_grad(f, x, 1e-5), OracleError);
}

TEST(FiniteDiff, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 0.1);  // 1e-9 / 1e-8
}

TEST(ReferenceAttention, SingleTokenIsValueProjection) {
  // one token attends only to itself, so the output is x Wv Wo
  RefAttentionParams<double> p;
  p.wq = Tensor<double>({2, 2}, std::vector<double>{1, 2, 3, 4});
  p.wk = Tensor<double>({2, 2}, std::vector<double>{-1, 0, 5, 1});
  p.wv = Tensor<double>::identity(2);
  p.wo = Tensor<double>({2, 1}, std::vector<double>{2, 3});
  p.heads = 2;
  Tensor<double> x({1, 2}, std::vector<double>{0.5, -1.0});
  EXPECT_NEAR(reference_attention(x, p)[0], 0.5 * 2 - 3.0, 1e-15);
  p.heads = 3;
  EXPECT_THROW(reference_attention(x, p), ConfigError);
}

TEST(ReferenceAttention, EqualKeysAverageValues) {
  RefAttentionParams<double> p;
  p.wq = Tensor<double>::identity(2);
  p.wk = Tensor<double>({2, 2});  // all keys zero: uniform weights
  p.wv = Tensor<double>::identity(2);
  p.wo = Tensor<double>::identity(2);
  Tensor<double> x({2, 2}, std::vector<double>{1, 2, 3, 6});
  const auto y = reference_attention(x, p);
  EXPECT_NEAR(y(0, 0), 2.0, 1e-15);
  EXPECT_NEAR(y(1, 1), 4.0, 1e-15);
}

TEST(CheckBlock, EveryBlockPassesOnSeedOne) {
  for (const auto& b : check_block_names()) {
    const GradReport r = check_block(b, 1);
    EXPECT_TRUE(r.passed) << r.to_json().dump();
    EXPECT_GT(r.coords, 0u) << b;
    EXPECT_LE(r.coords, 64u + 64u) << b;
  }
  EXPECT_THROW(check_block("nonexistent", 1), ConfigError);
}

// Whole model, batch of two in training mode: loss gradient w.r.t. a sample of
// parameters from every module against central differences.
TEST(CheckBlock, WholeModelGradient) {
  const ModelConfig cfg = check_config();
  Model<double> model(cfg);
  model.set_threads(1);
  Rng rng(17);
  detail::unit_scale(model.params(), rng);
  std::vector<Tensor<double>> images;
  for (int i = 0; i < 2; ++i) images.push_back(detail::random_tensor({64, 64, 3}, rng, 0.5));
  const std::vector<const Tensor<double>*> ptrs{&images[0], &images[1]};
  const std::vector<std::size_t> labels{1, 3};
  auto loss = [&]() { return model.loss(model.forward(ptrs, Phase::Train, {false, true}), labels); };
  auto st = model.forward(ptrs, Phase::Train, {true, true});
  ParamSet<double> G = model.params().zeros_like();
  model.backward(st, labels, G);

  double worst = 0.0;
  std::size_t checked = 0;
  for (const char* pfx : {"patch_embed.weight", "stage1.block0.attn.qkv.weight", "stage3.cls_proj.weight",
                          "transfer.stage2.w0", "msca.block0.cca.w1", "msca.block0.sca.stage3.q.weight",
                          "msca.block0.ffn.stage4.fc2.weight", "head.con.weight", "head.stage1.bias"}) {
    Tensor<double>& p = model.params().at(pfx);
    for (int n = 0; n < 4; ++n) {
      const std::size_t j = rng.below(p.size());
      const double orig = p[j];
      p[j] = orig + 1e-5;
      const double up = loss();
      p[j] = orig - 1e-5;
      const double down = loss();
      p[j] = orig;
      worst = std::max(worst, relative_error(G.at(pfx)[j], (up - down) / 2e-5));
      ++checked;
    }
  }
  EXPECT_EQ(checked, 36u);
  EXPECT_LT(worst, 1e-4);
}
