#include <cmath>

#include <gtest/gtest.h>

#include "m2former/heads.hpp"
#include "m2former/verify.hpp"

using namespace m2f;

TEST(Heads, SmoothedLabelEntriesAndMass) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + rng.below(300);
    const std::size_t t = rng.below(n);
    const double a = rng.uniform();
    const auto y = smoothed_label<double>(t, a, n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      sum += y[j];
      if (j == t) EXPECT_NEAR(y[j], a, 1e-12);
      else EXPECT_NEAR(y[j], (1.0 - a) / static_cast<double>(n), 1e-12);
    }
    EXPECT_NEAR(sum, a + static_cast<double>(n - 1) * (1.0 - a) / static_cast<double>(n), 1e-12);
  }
  EXPECT_THROW(smoothed_label<double>(4, 0.5, 4), LabelError);
  EXPECT_THROW(smoothed_label<double>(0, 1.5, 4), LabelError);
}

TEST(Heads, LogitGradientIsMassTimesSoftmaxMinusLabel) {
  Rng rng(2);
  Tensor<double> z({6});
  for (auto& v : z.data()) v = rng.normal();
  const auto label = smoothed_label<double>(2, 0.7, 6);
  auto loss = [&](const Tensor<double>& logits) {
    return cross_entropy(softmax_rows(logits.reshape({1, 6})).reshape({6}), label);
  };
  const auto y = softmax_rows(z.reshape({1, 6})).reshape({6});
  const auto g = cross_entropy_logit_grad(y, label);
  double mass = 0.0;
  for (double v : label.data()) mass += v;
  const auto fd = finite_diff_grad(loss, z, 1e-5);
  for (std::size_t j = 0; j < 6; ++j) {
    EXPECT_NEAR(g[j], mass * y[j] - label[j], 1e-14);
    EXPECT_LT(relative_error(g[j], fd[j]), 1e-5);
  }
}

TEST(Heads, NamesAndAlphasFollowActiveStages) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.msps_stages = {2, 4};
  EXPECT_EQ(head_names(cfg), (std::vector<std::string>{"head.stage2", "head.stage4", "head.con"}));
  const auto a = head_alphas(cfg);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_DOUBLE_EQ(a[0], cfg.alpha_schedule[1]);
  EXPECT_DOUBLE_EQ(a[2], cfg.alpha_schedule[4]);
  cfg.msps_stages = {};
  EXPECT_EQ(head_names(cfg), (std::vector<std::string>{"head.global"}));
}

TEST(Heads, AggregateSumsProbabilities) {
  PredictionSet<double> p;
  p.probs = {Tensor<double>({3}, std::vector<double>{0.6, 0.3, 0.1}),
             Tensor<double>({3}, std::vector<double>{0.0, 0.5, 0.5}),
             Tensor<double>({3}, std::vector<double>{0.1, 0.5, 0.4})};
  // per-head argmax votes 0,1,1 and the sums are 0.7, 1.3, 1.0
  EXPECT_EQ(aggregate_inference(p), 1u);
  PredictionSet<double> tie;
  tie.probs = {Tensor<double>({2}, std::vector<double>{0.5, 0.5})};
  EXPECT_EQ(aggregate_inference(tie), 0u);
}

TEST(Heads, TotalLossSumsHeads) {
  PredictionSet<double> p;
  p.probs = {Tensor<double>({2}, std::vector<double>{0.25, 0.75}),
             Tensor<double>({2}, std::vector<double>{0.5, 0.5})};
  const double l = total_loss(p, 1, {1.0, 1.0});
  EXPECT_NEAR(l, -std::log(0.75) - std::log(0.5), 1e-15);
  EXPECT_THROW(total_loss(p, 1, {1.0}), DimensionError);
}

TEST(Heads, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const GradReport r = check_block("heads", seed);
    EXPECT_TRUE(r.passed) << r.to_json().dump();
  }
}
