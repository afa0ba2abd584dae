#include <gtest/gtest.h>

#include "m2former/transfer.hpp"
#include "m2former/verify.hpp"

using namespace m2f;

namespace {

Tensor<double> random_rows(std::size_t m, std::size_t n, Rng& rng) {
  Tensor<double> t({m, n});
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace

TEST(Transfer, AttachDetachRoundTrip) {
  Rng rng(1);
  const auto patches = random_rows(5, 8, rng);
  const auto cls = random_rows(1, 8, rng).reshape({8});
  const auto tokens = attach_cls(patches, cls);
  ASSERT_EQ(tokens.shape(), (Shape{6, 8}));
  EXPECT_DOUBLE_EQ(tokens(5, 3), cls[3]);  // class token is the last row
  const auto [p, c] = detach_cls(tokens);
  EXPECT_EQ(p, patches);
  EXPECT_EQ(c, cls);
  EXPECT_THROW(attach_cls(patches, Tensor<double>({7})), DimensionError);
  EXPECT_THROW(detach_cls(Tensor<double>({1, 8})), DimensionError);
}

TEST(Transfer, ProjectionShapesPerStage) {
  ModelConfig cfg = check_config();
  Rng rng(2);
  ParamSet<double> P, buffers;
  add_transfer_params(P, buffers, cfg, rng);
  const std::size_t c4 = cfg.stage_channels[3];
  const auto cls_g = random_rows(4, c4, rng);
  for (std::size_t s = 0; s < 3; ++s) {
    TransferCache<double> cache;
    const auto out = transfer_cls<double>(cls_g, s, AttachMode::Ctt2Mlp, P, buffers, Phase::Train, &cache);
    EXPECT_EQ(out.shape(), (Shape{4, cfg.stage_channels[s]}));
    EXPECT_EQ(P.at(transfer_prefix(s) + ".w0").shape(), (Shape{2 * cfg.stage_channels[s], c4}));
  }
  EXPECT_FALSE(P.contains(transfer_prefix(3) + ".w0"));
}

TEST(Transfer, OneLayerVariantIsLinear) {
  ModelConfig cfg = check_config();
  cfg.ctt_mode = AttachMode::Ctt1Mlp;
  Rng rng(3);
  ParamSet<double> P, buffers;
  add_transfer_params(P, buffers, cfg, rng);
  EXPECT_EQ(buffers.size(), 0u);
  const auto a = random_rows(2, cfg.stage_channels[3], rng), b = random_rows(2, cfg.stage_channels[3], rng);
  auto f = [&](const Tensor<double>& x) {
    return transfer_cls<double>(x, 1, AttachMode::Ctt1Mlp, P, buffers, Phase::Train, nullptr);
  };
  EXPECT_LT(max_abs_diff(f(add(a, b)), add(f(a), f(b))), 1e-14);
}

TEST(Transfer, EvalPhaseUsesRunningStatistics) {
  ModelConfig cfg = check_config();
  Rng rng(4);
  ParamSet<double> P, buffers;
  add_transfer_params(P, buffers, cfg, rng);
  const auto x = random_rows(3, cfg.stage_channels[3], rng);
  // fresh buffers (mean 0, var 1) make eval a per-sample map: row order is irrelevant
  const auto full = transfer_cls<double>(x, 0, AttachMode::Ctt2Mlp, P, buffers, Phase::Eval, nullptr);
  Tensor<double> first({1, x.cols()});
  std::copy(x.row(0), x.row(0) + x.cols(), first.ptr());
  const auto single = transfer_cls<double>(first, 0, AttachMode::Ctt2Mlp, P, buffers, Phase::Eval, nullptr);
  for (std::size_t j = 0; j < single.cols(); ++j) EXPECT_NEAR(single(0, j), full(0, j), 1e-15);
}

TEST(Transfer, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const GradReport r = check_block("transfer_cls", seed);
    EXPECT_TRUE(r.passed) << r.to_json().dump();
  }
}
