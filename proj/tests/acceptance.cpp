// Acceptance gate: runs every acceptance criterion at its stated tolerance and
// time budget and prints one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 = all pass).
//
//   acceptance --work DIR [--only 1,2,...]

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "m2former/pipeline.hpp"
#include "m2former/verify.hpp"

using namespace m2f;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

template <typename T>
void append_bytes(std::string& out, const Tensor<T>& t) {
  out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(T));
}

// ---------------------------------------------------------------------------
// 1. geometry at full scale

struct GeometryRun {
  bool shapes_ok = true;
  std::string detail;
  std::string digest;  // raw bytes of every stage output and head probability
};

GeometryRun geometry_run() {
  GeometryRun g;
  const ModelConfig cfg = ModelConfig::full_scale();
  Model<float> model(cfg);
  model.set_threads(1);
  Rng rng(448);
  Tensor<float> image({448, 448, 3});
  for (auto& v : image.data()) v = static_cast<float>(rng.uniform());
  const auto st = model.forward({&image}, Phase::Eval, {false, false});
  const std::size_t grids[4] = {112, 56, 28, 14}, merged[4] = {3136, 784, 196, 49};
  std::ostringstream os;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const auto& f = st.samples[0].stages[s].features;
    const Shape want{grids[s], grids[s], cfg.stage_channels[s]};
    const std::size_t m = st.samples[0].selections[s].merged.rows();
    g.shapes_ok = g.shapes_ok && f.shape() == want && m == merged[s] &&
                  st.samples[0].selections[s].patches.rows() == cfg.k_schedule[s];
    os << (s ? " " : "") << shape_str(f.shape()) << "/" << m;
    append_bytes(g.digest, f);
    append_bytes(g.digest, st.samples[0].stages[s].cls);
  }
  for (const auto& p : st.predictions[0].probs) append_bytes(g.digest, p);
  g.detail = os.str();
  return g;
}

Outcome criterion_geometry() {
  const GeometryRun g = geometry_run();
  return {g.shapes_ok, "grids/merged " + g.detail};
}

// ---------------------------------------------------------------------------
// 2. top-k against a full sort

Outcome criterion_topk() {
  Rng rng(2);
  std::size_t checks = 0, mismatches = 0;
  for (int map = 0; map < 1000; ++map) {
    const std::size_t L = 1 + rng.below(4096), c = 1 + rng.below(4);
    const bool ties = map % 3 == 0;
    std::vector<float> scores(L);
    for (auto& v : scores) v = ties ? static_cast<float>(rng.below(8)) : static_cast<float>(rng.normal());
    Tensor<float> rows({L, c});
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t q = 0; q < c; ++q) rows(i, q) = static_cast<float>(i * c + q);
    }
    IndexList order(L);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::set<std::size_t> ks{1, L};
    if (L <= 256) {
      for (std::size_t k = 1; k <= L; ++k) ks.insert(k);
    } else {
      for (int i = 0; i < 6; ++i) ks.insert(1 + rng.below(L));
    }
    for (std::size_t k : ks) {
      const IndexList idx = topk_indices(std::span<const float>(scores), k);
      const Tensor<float> got = gather_rows(rows, idx);
      bool ok = std::equal(idx.begin(), idx.end(), order.begin());
      for (std::size_t j = 0; ok && j < k; ++j) {
        for (std::size_t q = 0; q < c; ++q) ok = ok && got(j, q) == rows(order[j], q);
      }
      mismatches += !ok;
      ++checks;
    }
  }
  return {mismatches == 0, std::to_string(checks) + " (map, k) pairs, " + std::to_string(mismatches) + " mismatches"};
}

// ---------------------------------------------------------------------------
// 3. smoothed label entries

Outcome criterion_label() {
  Rng rng(3);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + rng.below(999), t = rng.below(n);
    const double a = rng.uniform();
    const auto y = smoothed_label<double>(t, a, n);
    const double off = (1.0 - a) / static_cast<double>(n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      worst = std::max(worst, std::abs(y[j] - (j == t ? a : off)));
      sum += y[j];
    }
    worst = std::max(worst, std::abs(sum - (a + static_cast<double>(n - 1) * off)));
  }
  std::ostringstream os;
  os << "max deviation " << worst;
  return {worst <= 1e-12, os.str()};
}

// ---------------------------------------------------------------------------
// 4. channel attention with zeroed weights

Outcome criterion_cca() {
  const ModelConfig cfg = ModelConfig::toy();
  Rng rng(4);
  ParamSet<float> P, buffers;
  add_msca_params(P, buffers, cfg, rng);
  P.at("msca.block0.cca.w0").fill(0.0f);
  P.at("msca.block0.cca.w1").fill(0.0f);
  std::vector<StageSet<float>> batch(cfg.batch_size);
  for (auto& set : batch) {
    for (std::size_t s : cfg.active_stages()) {
      Tensor<float> t({cfg.k_schedule[s] + 1, cfg.stage_channels[s]});
      for (auto& v : t.data()) v = static_cast<float>(rng.normal());
      set.push_back(std::move(t));
    }
  }
  float worst = 0.0f;
  for (Phase phase : {Phase::Train, Phase::Eval}) {
    const auto out = cca_forward<float>(batch, P, buffers, "msca.block0.cca", phase, nullptr);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (std::size_t i = 0; i < batch[b].size(); ++i) {
        for (std::size_t j = 0; j < batch[b][i].size(); ++j) {
          // rounded before the subtraction so the compiler cannot fuse it into the residual
          const volatile float want = 1.5f * batch[b][i][j];
          worst = std::max(worst, std::abs(out[b][i][j] - want));
        }
      }
    }
  }
  std::ostringstream os;
  os << "max |out - 1.5 in| " << worst << " (train and eval phase)";
  return {worst <= 1e-7f, os.str()};
}

// ---------------------------------------------------------------------------
// 5. single-stage spatial cross-attention against the naive oracle

// f32 instances keep the model's own initialisation; f64 instances redraw every
// weight matrix at unit gain so the attention is far from uniform.
template <typename T>
std::pair<double, double> sca_worst(int instances, std::uint64_t seed, bool unit_gain) {
  Rng rng(seed);
  double worst = 0.0, peak = 0.0;
  for (int i = 0; i < instances; ++i) {
    ModelConfig cfg = ModelConfig::toy();
    const std::size_t stage = 1 + rng.below(4);
    cfg.msps_stages = {stage};
    ParamSet<T> P, buffers;
    add_msca_params(P, buffers, cfg, rng);
    for (std::size_t p = 0; p < P.size(); ++p) {
      Tensor<T>& t = P.value(p);
      if (!unit_gain || t.rank() != 2) continue;
      const double scale = 1.0 / std::sqrt(static_cast<double>(t.dim(0)));
      for (auto& v : t.data()) v = static_cast<T>(scale * rng.normal());
    }
    const std::size_t rows = 1 + rng.below(cfg.k_schedule[stage - 1] + 1);
    Tensor<T> y({rows, cfg.stage_channels[stage - 1]});
    for (auto& v : y.data()) v = static_cast<T>(rng.normal());
    const auto out = sca_forward<T>({y}, cfg.active_stages(), cfg.msca_heads, P, "msca.block0.sca", nullptr);
    const auto ref = reference_attention(y, reference_from_sca(P, "msca.block0.sca." + stage_name(stage - 1),
                                                               cfg.msca_heads));
    worst = std::max(worst, static_cast<double>(max_abs_diff(out[0], ref)));
    for (auto v : ref.data()) peak = std::max(peak, std::abs(static_cast<double>(v)));
  }
  return {worst, peak};
}

Outcome criterion_sca() {
  const auto [f32, peak32] = sca_worst<float>(20, 5, false);
  const auto [f64, peak64] = sca_worst<double>(20, 5, true);
  std::ostringstream os;
  os << "max abs diff f32 " << f32 << " (max |out| " << peak32 << "), f64 " << f64 << " (max |out| " << peak64
     << ") over 20 instances each";
  return {f32 < 1e-6 && f64 < 1e-10, os.str()};
}

// ---------------------------------------------------------------------------
// 6. block gradient suite

Outcome criterion_grad() {
  bool ok = true;
  double worst = 0.0;
  std::size_t reports = 0;
  std::string failed;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& b : check_block_names()) {
      const GradReport r = check_block(b, seed);
      ok = ok && r.passed && r.zero_check;
      if (!r.passed) failed += " " + b + "/" + std::to_string(seed);
      worst = std::max(worst, r.max_rel);
      ++reports;
    }
  }
  std::ostringstream os;
  os << reports << " block checks, max rel err " << worst;
  if (!failed.empty()) os << ", failed:" << failed;
  return {ok, os.str()};
}

// ---------------------------------------------------------------------------
// 7. desk-scale training

struct TrainRun {
  bool ok = false;
  std::string detail;
};

fs::path data_dir(const fs::path& work, std::uint64_t seed) { return work / ("data_seed" + std::to_string(seed)); }

TrainRun train_run(const fs::path& work, std::uint64_t seed, const std::string& tag) {
  TrainRun out;
  const fs::path data = data_dir(work, seed);
  const auto rep = generate_dataset(data.string(), 4, 64, 16, 128, seed);
  ModelConfig cfg = ModelConfig::toy();
  cfg.seed = seed;
  const Dataset train = load_split(data.string(), "train");
  const Dataset eval = load_split(data.string(), "eval");
  Model<float> model(cfg);
  model.set_threads(1);
  TrainOptions opt;
  opt.out_dir = (work / ("train_seed" + std::to_string(seed) + tag)).string();
  opt.eval_set = &eval;
  const TrainResult r = train_model(model, train, opt);
  double loss0 = NAN, loss200 = NAN;
  for (const auto& m : r.metrics) {
    if (m["step"] == 0) loss0 = m["train"]["loss"].get<double>();
    if (m["step"] == 200) loss200 = m["train"]["loss"].get<double>();
  }
  const double acc = r.final_train.agg_acc;
  out.ok = rep.train_count == 256 && r.steps_run <= 2000 && acc >= 0.95 && loss200 < loss0 &&
           r.wall_seconds <= 900.0;
  std::ostringstream os;
  os << "seed " << seed << ": acc " << acc << " at step " << r.steps_run << ", loss0 " << loss0 << " loss200 "
     << loss200 << ", " << static_cast<int>(r.wall_seconds) << " s";
  out.detail = os.str();
  return out;
}

Outcome criterion_train(const fs::path& work) {
  Outcome o{true, ""};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const TrainRun r = train_run(work, seed, "");
    o.pass = o.pass && r.ok;
    o.detail += (seed > 1 ? "; " : "") + r.detail;
  }
  return o;
}

// ---------------------------------------------------------------------------
// 8. scale buckets on the eval split

Outcome criterion_buckets(const fs::path& work) {
  const fs::path data = data_dir(work, 1);
  if (!fs::exists(split_paths(data.string(), "eval").container)) generate_dataset(data.string(), 4, 64, 16, 128, 1);
  const Dataset eval = load_split(data.string(), "eval");
  const auto b = bucket_dataset(eval);
  std::array<std::size_t, 3> n{0, 0, 0};
  for (auto l : b.labels) ++n[static_cast<std::size_t>(l)];
  const double N = static_cast<double>(eval.size());
  auto near = [](std::size_t got, double want) { return std::abs(static_cast<double>(got) - want) <= 1.0; };
  const bool split_ok = near(n[0], 0.25 * N) && near(n[1], 0.5 * N) && near(n[2], 0.25 * N);

  const fs::path ckpt = work / "train_seed1" / "checkpoint.m2ck";
  const Model<float> model = fs::exists(ckpt) ? load_checkpoint<float>(ckpt.string()) : Model<float>(ModelConfig::toy());
  const EvalMetrics em = evaluate_model(model, eval);
  const bool reported = em.bucket_acc[0] && em.bucket_acc[1] && em.bucket_acc[2] &&
                        em.bucket_count[0] == n[0] && em.bucket_count[1] == n[1] && em.bucket_count[2] == n[2];
  std::ostringstream os;
  os << "eval " << eval.size() << " -> " << n[0] << "/" << n[1] << "/" << n[2] << " (q1 " << b.q1 << ", q3 " << b.q3
     << "), bucket acc";
  for (const auto& a : em.bucket_acc) os << ' ' << (a ? std::to_string(*a) : "null");
  if (!fs::exists(ckpt)) os << " (untrained model)";
  return {split_ok && reported, os.str()};
}

// ---------------------------------------------------------------------------
// 9. ablation structure

Outcome criterion_ablation(const fs::path& work) {
  const fs::path data = data_dir(work, 1);
  if (!fs::exists(split_paths(data.string(), "train").container)) generate_dataset(data.string(), 4, 64, 16, 128, 1);
  const Dataset train = load_split(data.string(), "train");
  const Dataset eval = load_split(data.string(), "eval");
  ModelConfig base = ModelConfig::toy();
  base.steps = 20;
  base.eval_interval = 10;
  const auto rows = run_ablation<float>(base, {"msps_stages=none", "msps_stages=4"}, train, eval,
                                        (work / "ablation").string());
  // independent count: backbone parameters plus one linear classifier on CLS_g
  ParamSet<float> backbone;
  Rng rng(0);
  add_backbone_params(backbone, base, rng);
  const std::size_t c4 = base.stage_channels[3], n = base.num_classes;
  const std::size_t expected = backbone.scalar_count() + c4 * n + n;
  const bool bare_ok = rows.size() == 2 && rows[0].params == expected &&
                       rows[0].heads == std::vector<std::string>{"head.global"};
  const bool single_ok = rows.size() == 2 && rows[1].steps == base.steps && std::isfinite(rows[1].eval_acc) &&
                         rows[1].heads == std::vector<std::string>{"head.stage4", "head.con"} &&
                         fs::exists(work / "ablation" / "variant1" / "checkpoint.m2ck");
  std::ostringstream os;
  os << "bare params " << (rows.empty() ? 0 : rows[0].params) << " vs backbone+head " << expected
     << "; stage-4-only ran " << (rows.size() > 1 ? rows[1].steps : 0) << " steps";
  return {bare_ok && single_ok, os.str()};
}

// ---------------------------------------------------------------------------
// 10. determinism of 1 and 7

Outcome criterion_determinism(const fs::path& work) {
  const GeometryRun a = geometry_run(), b = geometry_run();
  bool ok = a.digest == b.digest && !a.digest.empty();
  std::string detail = std::string("geometry outputs ") + (ok ? "identical" : "differ");
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const fs::path first = work / ("train_seed" + std::to_string(seed));
    if (!fs::exists(first / "metrics.jsonl")) train_run(work, seed, "");
    train_run(work, seed, "_rerun");
    const fs::path second = work / ("train_seed" + std::to_string(seed) + "_rerun");
    const bool same = slurp(first / "metrics.jsonl") == slurp(second / "metrics.jsonl") &&
                      slurp(first / "checkpoint.m2ck") == slurp(second / "checkpoint.m2ck") &&
                      !slurp(first / "metrics.jsonl").empty();
    ok = ok && same;
    detail += "; seed " + std::to_string(seed) + (same ? " identical" : " differs");
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory for datasets, runs and checkpoints");
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  const fs::path w(work);

  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all{
      {1, "geometry conformance", 120, criterion_geometry},
      {2, "selection oracle equivalence", 10, criterion_topk},
      {3, "smoothed label fidelity", 1, criterion_label},
      {4, "cca forced case", 1, criterion_cca},
      {5, "sca reduction", 10, criterion_sca},
      {6, "gradient suite", 600, criterion_grad},
      {7, "desk-scale training", 2700, [&] { return criterion_train(w); }},
      {8, "scale-bucket contract", 60, [&] { return criterion_buckets(w); }},
      {9, "ablation structure", 1200, [&] { return criterion_ablation(w); }},
      {10, "determinism", 3000, [&] { return criterion_determinism(w); }},
  };

  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::cout << "criterion " << c.id << " " << (pass ? "PASS" : "FAIL") << "  " << c.name << "  " << o.detail
              << "  [" << secs << " s / budget " << c.budget_s << " s" << (in_time ? "" : ", over budget") << "]"
              << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed;
}
