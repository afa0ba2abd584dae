#include <sstream>

#include <gtest/gtest.h>

#include "m2former/crossattn.hpp"
#include "m2former/verify.hpp"

using namespace m2f;

namespace {

template <typename T>
StageSet<T> random_tokens(const ModelConfig& cfg, Rng& rng) {
  StageSet<T> out;
  for (std::size_t s : cfg.active_stages()) {
    Tensor<T> t({cfg.k_schedule[s] + 1, cfg.stage_channels[s]});
    for (auto& v : t.data()) v = static_cast<T>(rng.normal());
    out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
void redraw(ParamSet<T>& P, Rng& rng, double scale) {
  for (std::size_t i = 0; i < P.size(); ++i) {
    for (auto& v : P.value(i).data()) v = static_cast<T>(scale * rng.normal());
  }
}

}  // namespace

TEST(Cca, ZeroedWeightsGiveOnePointFiveTimesInput) {
  const ModelConfig cfg = check_config();
  Rng rng(1);
  ParamSet<float> P, buffers;
  add_msca_params(P, buffers, cfg, rng);
  P.at("msca.block0.cca.w0").fill(0.0f);
  P.at("msca.block0.cca.w1").fill(0.0f);
  std::vector<StageSet<float>> batch{random_tokens<float>(cfg, rng), random_tokens<float>(cfg, rng)};
  for (Phase phase : {Phase::Train, Phase::Eval}) {
    const auto out = cca_forward<float>(batch, P, buffers, "msca.block0.cca", phase, nullptr);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (std::size_t i = 0; i < batch[b].size(); ++i) {
        for (std::size_t j = 0; j < batch[b][i].size(); ++j) {
          EXPECT_NEAR(out[b][i][j], 1.5f * batch[b][i][j], 1e-7f);
        }
      }
    }
  }
}

TEST(Cca, DescriptorsAreStageMeansConcatenated) {
  StageSet<double> s{Tensor<double>({2, 2}, std::vector<double>{1, 2, 3, 4}),
                     Tensor<double>({1, 3}, std::vector<double>{5, 6, 7})};
  const auto d = channel_descriptors<double>({s});
  ASSERT_EQ(d.shape(), (Shape{1, 5}));
  EXPECT_EQ(d, Tensor<double>({1, 5}, std::vector<double>{2, 3, 5, 6, 7}));
}

TEST(Sca, SingleStageEqualsReferenceAttention) {
  for (std::size_t stage = 1; stage <= 4; ++stage) {
    ModelConfig cfg = check_config();
    cfg.msps_stages = {stage};
    Rng rng(20 + stage);
    ParamSet<double> P, buffers;
    add_msca_params(P, buffers, cfg, rng);
    redraw(P, rng, 0.25);
    const auto Y = random_tokens<double>(cfg, rng);
    const auto out = sca_forward<double>(Y, cfg.active_stages(), cfg.msca_heads, P, "msca.block0.sca", nullptr);
    const std::string sp = "msca.block0.sca." + stage_name(stage - 1);
    const auto ref = reference_attention(Y[0], reference_from_sca(P, sp, cfg.msca_heads));
    EXPECT_LT(max_abs_diff(out[0], ref), 1e-12) << "stage " << stage;
  }
}

TEST(Sca, QueriesSeeEveryStagesKeys) {
  const ModelConfig cfg = check_config();
  Rng rng(5);
  ParamSet<double> P, buffers;
  add_msca_params(P, buffers, cfg, rng);
  redraw(P, rng, 0.25);
  auto Y = random_tokens<double>(cfg, rng);
  ScaCache<double> cache;
  const auto base = sca_forward<double>(Y, cfg.active_stages(), cfg.msca_heads, P, "msca.block0.sca", &cache);
  std::size_t total = 0;
  for (const auto& y : Y) total += y.rows();
  ASSERT_EQ(cache.probs[0][0].shape(), (Shape{Y[0].rows(), total}));
  // perturbing the last stage moves the first stage's output
  Y.back()(0, 0) += 1.0;
  const auto moved = sca_forward<double>(Y, cfg.active_stages(), cfg.msca_heads, P, "msca.block0.sca", nullptr);
  EXPECT_GT(max_abs_diff(base[0], moved[0]), 1e-6);
}

TEST(Sca, HeadAveragedMapsSumToOne) {
  const ModelConfig cfg = check_config();
  Rng rng(6);
  ParamSet<double> P, buffers;
  add_msca_params(P, buffers, cfg, rng);
  redraw(P, rng, 0.25);
  const auto Y = random_tokens<double>(cfg, rng);
  ScaCache<double> cache;
  sca_forward<double>(Y, cfg.active_stages(), cfg.msca_heads, P, "msca.block0.sca", &cache);
  std::vector<IndexList> idx;
  for (const auto& y : Y) {
    IndexList l(y.rows() - 1);
    for (std::size_t i = 0; i < l.size(); ++i) l[i] = 10 * i;
    idx.push_back(l);
  }
  const auto recs = extract_attention_maps(cache, cfg.active_stages(), idx, 2, 1);
  double sum = 0.0;
  std::size_t cls_rows = 0;
  for (const auto& r : recs) {
    sum += r.weight;
    cls_rows += r.merged_grid_index == kClsGridIndex;
  }
  EXPECT_NEAR(sum, 1.0, 1e-6);
  EXPECT_EQ(cls_rows, Y.size());
  EXPECT_THROW(extract_attention_maps(cache, cfg.active_stages(), idx, 2, Y[1].rows()), IndexError);
  std::stringstream ss;
  write_attention_dump(ss, recs);
  EXPECT_EQ(read_attention_dump(ss), recs);
}

TEST(Msca, GradientsMatchFiniteDifferences) {
  for (const char* block : {"cca", "sca", "msca_block"}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const GradReport r = check_block(block, seed);
      EXPECT_TRUE(r.passed) << r.to_json().dump();
    }
  }
}
