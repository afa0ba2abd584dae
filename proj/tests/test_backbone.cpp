#include <gtest/gtest.h>

#include "m2former/backbone.hpp"
#include "m2former/verify.hpp"

using namespace m2f;

namespace {

Tensor<double> random_image(const ModelConfig& cfg, Rng& rng) {
  Tensor<double> img({cfg.input_size, cfg.input_size, cfg.in_channels});
  for (auto& v : img.data()) v = rng.uniform();
  return img;
}

void redraw(ParamSet<double>& P, Rng& rng, double scale) {
  for (std::size_t i = 0; i < P.size(); ++i) {
    for (auto& v : P.value(i).data()) v = scale * rng.normal();
  }
}

}  // namespace

TEST(Backbone, ToyStageGeometry) {
  const ModelConfig cfg = ModelConfig::toy();
  Rng rng(cfg.seed);
  ParamSet<double> P;
  add_backbone_params(P, cfg, rng);
  const auto out = forward_backbone(random_image(cfg, rng), P, cfg, static_cast<BackboneCache<double>*>(nullptr));
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::size_t side = cfg.input_size / (4u << s);
    EXPECT_EQ(out[s].features.shape(), (Shape{side, side, cfg.stage_channels[s]})) << "stage " << s;
    EXPECT_EQ(out[s].cls.shape(), (Shape{cfg.stage_channels[s]}));
    EXPECT_TRUE(out[s].features.all_finite());
  }
  // each stage quarters the token count
  for (std::size_t s = 1; s < kNumStages; ++s) EXPECT_EQ(cfg.grid_tokens(s - 1), 4 * cfg.grid_tokens(s));
}

TEST(Backbone, FiniteOnRandomImages) {
  const ModelConfig cfg = check_config();
  Rng rng(2);
  ParamSet<double> P;
  add_backbone_params(P, cfg, rng);
  for (int i = 0; i < 100; ++i) {
    const auto out = forward_backbone(random_image(cfg, rng), P, cfg, static_cast<BackboneCache<double>*>(nullptr));
    for (const auto& o : out) ASSERT_TRUE(o.features.all_finite() && o.cls.all_finite());
  }
}

TEST(Backbone, RejectsWrongImageShape) {
  const ModelConfig cfg = check_config();
  Rng rng(1);
  ParamSet<double> P;
  add_backbone_params(P, cfg, rng);
  EXPECT_THROW(forward_backbone(Tensor<double>({32, 32, 3}), P, cfg, static_cast<BackboneCache<double>*>(nullptr)), DimensionError);
}

TEST(Backbone, PatchExtractionOrder) {
  // 4x8 image, one channel, value = linear pixel index
  Tensor<double> img({4, 8, 1});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  const auto p = extract_patches(img);
  ASSERT_EQ(p.shape(), (Shape{2, 16}));
  EXPECT_DOUBLE_EQ(p(1, 0), 4.0);   // second patch starts at column 4
  EXPECT_DOUBLE_EQ(p(1, 4), 12.0);  // its second row
  EXPECT_DOUBLE_EQ(p(0, 15), 27.0);
  EXPECT_THROW(extract_patches(Tensor<double>({6, 8, 1})), ConfigError);
}

TEST(Backbone, AttentionMatchesReference) {
  for (std::size_t heads : {1u, 2u, 4u}) {
    Rng rng(10 + heads);
    ParamSet<double> P;
    add_encoder_block(P, "blk", 16, rng);
    redraw(P, rng, 0.3);
    Tensor<double> x({13, 16});
    for (auto& v : x.data()) v = rng.normal();
    const auto ref = reference_attention(x, reference_from_mhsa(P, "blk.attn", heads));
    AttentionCache<double> cache;
    EXPECT_LT(max_abs_diff(mhsa_forward(x, heads, P, "blk.attn", &cache), ref), 1e-12) << heads;
    EXPECT_LT(max_abs_diff(mhsa_forward<double>(x, heads, P, "blk.attn", nullptr), ref), 1e-12) << heads;
  }
}

TEST(Backbone, StageGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const GradReport r = check_block("run_stage", seed);
    EXPECT_TRUE(r.passed) << r.to_json().dump();
  }
}
