#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "m2former/pipeline.hpp"
#include "m2former/verify.hpp"

using namespace m2f;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("m2f_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ModelConfig small_config() {
  ModelConfig c = check_config();
  c.batch_size = 4;
  c.steps = 3;
  c.eval_interval = 2;
  return c;
}

}  // namespace

TEST(Config, TextRoundTripAndHash) {
  const ModelConfig a = ModelConfig::toy();
  const ModelConfig b = parse_config(a.to_text());
  EXPECT_EQ(a.to_text(), b.to_text());
  EXPECT_EQ(a.hash(), b.hash());
  const ModelConfig c = apply_overrides(a, "seed=9; msps_stages=2,4");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.msps_stages, (std::vector<std::size_t>{2, 4}));
  EXPECT_NE(c.hash(), a.hash());
  EXPECT_TRUE(apply_overrides(a, "msps_stages=none").bare_backbone());
  EXPECT_THROW(parse_config("bogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("k_schedule = 1000,16,8,2\n"), SelectionError);
}

TEST(Data, GenerationIsDeterministicAndBalanced) {
  const Dataset a = generate_split(4, 5, 64, 3), b = generate_split(4, 5, 64, 3), c = generate_split(4, 5, 64, 4);
  ASSERT_EQ(a.size(), 20u);
  std::array<int, 4> counts{};
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    ++counts[a.samples[i].label];
    differs = differs || !(a.samples[i].image == c.samples[i].image);
  }
  EXPECT_TRUE(differs);
  for (int n : counts) EXPECT_EQ(n, 5);
  EXPECT_THROW(generate_split(4, 5, 60, 3), DimensionError);
}

TEST(Data, ContainerRoundTripAndProbe) {
  const fs::path dir = scratch("data");
  const auto rep = generate_dataset(dir.string(), 4, 8, 4, 64, 1);
  EXPECT_EQ(rep.train_count, 32u);
  EXPECT_EQ(rep.eval_count, 16u);
  EXPECT_GE(rep.probe_accuracy, 0.9);
  const Dataset back = load_split(dir.string(), "train");
  const Dataset orig = generate_split(4, 8, 64, 1);
  ASSERT_EQ(back.size(), orig.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back.samples[i].image, orig.samples[i].image);
    EXPECT_EQ(back.samples[i].label, orig.samples[i].label);
    EXPECT_EQ(back.samples[i].box.area(), orig.samples[i].box.area());
  }
  EXPECT_THROW(load_split(dir.string(), "missing"), IoError);
}

TEST(Buckets, QuartileExamples) {
  const auto r = bucket_by_scale(std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  EXPECT_DOUBLE_EQ(r.q1, 2.75);
  EXPECT_DOUBLE_EQ(r.q3, 6.25);
  const std::vector<ScaleBucket> expect{ScaleBucket::Small,  ScaleBucket::Small,  ScaleBucket::Medium,
                                        ScaleBucket::Medium, ScaleBucket::Medium, ScaleBucket::Medium,
                                        ScaleBucket::Large,  ScaleBucket::Large};
  EXPECT_EQ(r.labels, expect);
  for (auto b : bucket_by_scale(std::vector<double>(9, 5.0)).labels) EXPECT_EQ(b, ScaleBucket::Medium);
  EXPECT_THROW(bucket_by_scale(std::vector<double>{1, 2, 3}), BucketError);
}

TEST(Buckets, PermutationInvariant) {
  Rng rng(4);
  std::vector<double> a(41);
  for (auto& v : a) v = static_cast<double>(rng.below(500));
  const auto base = bucket_by_scale(a);
  std::vector<std::size_t> perm(a.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm.begin(), perm.end());
  std::vector<double> b(a.size());
  for (std::size_t i = 0; i < perm.size(); ++i) b[i] = a[perm[i]];
  const auto shuffled = bucket_by_scale(b);
  EXPECT_DOUBLE_EQ(base.q1, shuffled.q1);
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(shuffled.labels[i], base.labels[perm[i]]);
}

TEST(Checkpoint, RoundTripAndHashMismatch) {
  const fs::path dir = scratch("ckpt");
  ModelConfig cfg = small_config();
  Model<float> m(cfg);
  m.buffers().at("msca.block0.cca.bn.running_mean")[0] = 0.5f;
  const std::string path = (dir / "a.m2ck").string();
  save_checkpoint(path, m, 17);
  CheckpointInfo info;
  const Model<float> back = load_checkpoint<float>(path, &cfg, &info);
  EXPECT_EQ(info.step, 17u);
  EXPECT_EQ(info.hash, cfg.hash());
  for (std::size_t i = 0; i < m.params().size(); ++i) EXPECT_EQ(back.params().value(i), m.params().value(i));
  EXPECT_EQ(back.buffers().at("msca.block0.cca.bn.running_mean")[0], 0.5f);
  // f32 payload widened on load
  const Model<double> wide = load_checkpoint<double>(path);
  EXPECT_EQ(wide.params().value(0)[0], static_cast<double>(m.params().value(0)[0]));

  ModelConfig other = cfg;
  other.seed = cfg.seed + 1;
  EXPECT_THROW(load_checkpoint<float>(path, &other), VersionError);
  {
    std::string bytes = slurp(path);
    bytes[4] = 9;  // version field
    std::ofstream(dir / "bad.m2ck", std::ios::binary) << bytes;
  }
  EXPECT_THROW(load_checkpoint<float>((dir / "bad.m2ck").string()), VersionError);
}

TEST(Dump, DeterministicAndNormalized) {
  const fs::path dir = scratch("dump");
  const ModelConfig cfg = small_config();
  const Model<float> m(cfg);
  const Dataset ds = generate_split(4, 1, 64, 2);
  const auto a = dump_attention(m, ds.samples[0], 2, 0, (dir / "a").string());
  const auto b = dump_attention(m, ds.samples[0], 2, 0, (dir / "b").string());
  EXPECT_EQ(a.attention, b.attention);
  EXPECT_EQ(slurp(dir / "a" / "attention.m2ad"), slurp(dir / "b" / "attention.m2ad"));
  EXPECT_EQ(slurp(dir / "a" / "selection.m2sd"), slurp(dir / "b" / "selection.m2sd"));
  double sum = 0.0;
  for (const auto& r : a.attention) sum += r.weight;
  EXPECT_NEAR(sum, 1.0, 1e-5);
  ASSERT_EQ(a.selection.size(), 4u);
  EXPECT_EQ(a.selection[0].indices.size(), cfg.k_schedule[0]);
  EXPECT_THROW(dump_attention(m, ds.samples[0], 2, 99, (dir / "c").string()), IndexError);
}

TEST(Ablation, BareBackboneParameterCount) {
  ModelConfig base = small_config();
  const ModelConfig bare = apply_overrides(base, "msps_stages=");
  ParamSet<float> backbone;
  Rng rng(0);
  add_backbone_params(backbone, bare, rng);
  const std::size_t c4 = bare.stage_channels[3], n = bare.num_classes;
  EXPECT_EQ(Model<float>(bare).params().scalar_count(), backbone.scalar_count() + c4 * n + n);
  EXPECT_GT(Model<float>(base).params().scalar_count(), backbone.scalar_count() + c4 * n + n);
}

TEST(Ablation, SweepRunsAndWritesRows) {
  const fs::path dir = scratch("ablate");
  const ModelConfig base = small_config();
  const Dataset train = generate_split(4, 2, 64, 5), eval = generate_split(4, 1, 64, 6);
  const auto rows =
      run_ablation<float>(base, {"base", "msps_stages=", "msps_stages=4"}, train, eval, (dir / "out").string());
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].heads, (std::vector<std::string>{"head.global"}));
  EXPECT_EQ(rows[2].heads, (std::vector<std::string>{"head.stage4", "head.con"}));
  for (const auto& r : rows) EXPECT_EQ(r.steps, base.steps);
  std::ifstream is(dir / "out" / "ablation.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) ++lines;
  EXPECT_EQ(lines, 3u);
  EXPECT_TRUE(fs::exists(dir / "out" / "variant2" / "checkpoint.m2ck"));
}

TEST(Training, MetricsAreReproducible) {
  const ModelConfig cfg = small_config();
  const Dataset train = generate_split(4, 2, 64, 7);
  const fs::path dir = scratch("repro");
  for (const char* run : {"a", "b"}) {
    Model<float> m(cfg);
    m.set_threads(1);
    TrainOptions opt;
    opt.out_dir = (dir / run).string();
    const auto r = train_model(m, train, opt);
    EXPECT_EQ(r.steps_run, cfg.steps);
    EXPECT_EQ(r.metrics.size(), 3u);  // steps 0, 2 and 3
  }
  EXPECT_EQ(slurp(dir / "a" / "metrics.jsonl"), slurp(dir / "b" / "metrics.jsonl"));
  EXPECT_EQ(slurp(dir / "a" / "checkpoint.m2ck"), slurp(dir / "b" / "checkpoint.m2ck"));
}

TEST(Evaluate, ReportsBuckets) {
  const ModelConfig cfg = small_config();
  const Model<float> m(cfg);
  const Dataset eval = generate_split(4, 3, 64, 8);
  const EvalMetrics em = evaluate_model(m, eval);
  EXPECT_EQ(em.bucket_count[0] + em.bucket_count[1] + em.bucket_count[2], eval.size());
  const auto j = em.to_json();
  EXPECT_TRUE(j["bucket_acc"].contains("small"));
  EXPECT_EQ(j["head_acc"].size(), 5u);
}
