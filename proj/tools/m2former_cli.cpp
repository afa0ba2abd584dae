// m2former: dataset generation, training, evaluation, gradient checks,
// attention dumps and ablation sweeps.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "m2former/pipeline.hpp"
#include "m2former/verify.hpp"

namespace fs = std::filesystem;
using namespace m2f;

namespace {

struct Common {
  std::string config;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string precision = "f32";
  std::string deterministic = "on";
};

void add_common(CLI::App* cmd, Common& c, bool config, bool data, bool out) {
  if (config) cmd->add_option("--config", c.config, "flat key = value config file");
  if (data) cmd->add_option("--data", c.data, "dataset directory (train/eval splits)");
  if (out) cmd->add_option("--out", c.out, "output directory");
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&c](std::uint64_t s) { c.seed = s, c.seed_set = true; }, "random seed");
  cmd->add_option("--precision", c.precision, "scalar type")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--deterministic", c.deterministic, "single worker thread when on")
      ->check(CLI::IsMember({"on", "off"}));
}

ModelConfig resolve_config(const Common& c) {
  ModelConfig cfg = c.config.empty() ? ModelConfig::toy() : load_config(c.config);
  if (c.seed_set) cfg.seed = c.seed;
  cfg.validate();
  return cfg;
}

std::size_t worker_threads(const Common& c) {
  return c.deterministic == "on" ? 1 : std::max(1u, std::thread::hardware_concurrency());
}

void require(const std::string& v, const char* flag) {
  if (v.empty()) throw ConfigError(std::string(flag) + " is required");
}

template <typename T>
int run_train(const Common& c) {
  require(c.data, "--data");
  require(c.out, "--out");
  const ModelConfig cfg = resolve_config(c);
  const Dataset train = load_split(c.data, "train");
  std::optional<Dataset> eval;
  if (fs::exists(split_paths(c.data, "eval").container)) eval = load_split(c.data, "eval");
  Model<T> model(cfg);
  model.set_threads(worker_threads(c));
  fs::create_directories(c.out);
  std::ofstream(fs::path(c.out) / "config.txt") << cfg.to_text();
  TrainOptions opt;
  opt.out_dir = c.out;
  opt.eval_set = eval ? &*eval : nullptr;
  opt.log = &std::cerr;
  const TrainResult r = train_model(model, train, opt);
  std::cout << nlohmann::json{{"steps", r.steps_run},
                              {"reached_target", r.reached_target},
                              {"train_acc", r.final_train.agg_acc},
                              {"config_hash", hash_hex(cfg.hash())},
                              {"checkpoint", (fs::path(c.out) / "checkpoint.m2ck").string()}}
                   .dump()
            << '\n';
  return 0;
}

template <typename T>
int run_eval(const Common& c, const std::string& checkpoint, const std::string& split) {
  require(checkpoint, "--checkpoint");
  require(c.data, "--data");
  std::optional<ModelConfig> expected;
  if (!c.config.empty()) expected = resolve_config(c);
  CheckpointInfo info;
  Model<T> model = load_checkpoint<T>(checkpoint, expected ? &*expected : nullptr, &info);
  model.set_threads(worker_threads(c));
  const Dataset ds = load_split(c.data, split);
  nlohmann::json out = evaluate_model(model, ds).to_json();
  out["split"] = split;
  out["step"] = info.step;
  out["seed"] = info.config.seed;
  out["config_hash"] = hash_hex(info.hash);
  std::cout << out.dump() << '\n';
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    std::ofstream(fs::path(c.out) / "eval.json") << out.dump() << '\n';
  }
  return 0;
}

template <typename T>
int run_dump(const Common& c, const std::string& checkpoint, const std::string& split, std::size_t sample,
             std::size_t query_stage, std::size_t query_row) {
  require(checkpoint, "--checkpoint");
  require(c.data, "--data");
  require(c.out, "--out");
  const Model<T> model = load_checkpoint<T>(checkpoint);
  const Dataset ds = load_split(c.data, split);
  if (sample >= ds.size()) throw IndexError("--sample " + std::to_string(sample) + " outside the split");
  const DumpResult r = dump_attention(model, ds.samples[sample], query_stage, query_row, c.out);
  std::cout << nlohmann::json{{"attention_records", r.attention.size()},
                              {"selection_records", r.selection.size()},
                              {"out", c.out}}
                   .dump()
            << '\n';
  return 0;
}

template <typename T>
int run_ablate(const Common& c, const std::vector<std::string>& switches, std::size_t steps) {
  require(c.data, "--data");
  ModelConfig base = resolve_config(c);
  if (steps > 0) base.steps = steps;
  std::vector<std::string> variants{"base"};
  variants.insert(variants.end(), switches.begin(), switches.end());
  const Dataset train = load_split(c.data, "train");
  const Dataset eval = load_split(c.data, "eval");
  const auto rows = run_ablation<T>(base, variants, train, eval, c.out, &std::cerr);
  std::cout << format_ablation_table(rows);
  return 0;
}

template <typename F>
int dispatch(const std::string& precision, F&& f) {
  return precision == "f64" ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"m2former: multi-scale patch selection and cross-attention transformer"};
  app.require_subcommand(1);
  Common c;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, c, false, false, true);
  std::size_t classes = 4, per_class = 64, eval_per_class = 16, size = 128;
  gen->add_option("--classes", classes, "number of classes");
  gen->add_option("--per-class", per_class, "training records per class");
  gen->add_option("--eval-per-class", eval_per_class, "evaluation records per class");
  gen->add_option("--size", size, "image side in pixels (multiple of 32)");

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, c, true, true, true);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, c, true, true, true);
  std::string checkpoint, split = "eval";
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--split", split, "dataset split")->check(CLI::IsMember({"train", "eval"}));

  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient checks");
  add_common(grad, c, false, false, true);
  std::vector<std::string> blocks;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  GradThresholds th;
  grad->add_option("--block", blocks, "block(s) to check (default: all)");
  grad->add_option("--seeds", seeds, "seeds to check");
  grad->add_option("--eps", th.eps, "finite-difference step");
  grad->add_option("--max-rel", th.max_rel, "relative error threshold");

  auto* dump = app.add_subcommand("dump-attn", "dump attention weights and selected patches");
  add_common(dump, c, false, true, true);
  std::size_t sample = 0, query_stage = 1, query_row = 0;
  dump->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  dump->add_option("--split", split, "dataset split")->check(CLI::IsMember({"train", "eval"}));
  dump->add_option("--sample", sample, "record index within the split");
  dump->add_option("--query-stage", query_stage, "1-based stage of the query token");
  dump->add_option("--query-row", query_row, "row of the query token (class token is the last row)");

  auto* ablate = app.add_subcommand("ablate", "train and evaluate config variants");
  add_common(ablate, c, true, true, true);
  std::vector<std::string> switches;
  std::size_t ablate_steps = 0;
  ablate->add_option("--switch", switches, "variant as key=value[;key=value...], repeatable")->required();
  ablate->add_option("--steps", ablate_steps, "override the step budget of every variant");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      require(c.out, "--out");
      const auto rep = generate_dataset(c.out, classes, per_class, eval_per_class, size, c.seed_set ? c.seed : 1);
      std::cout << nlohmann::json{{"train", rep.train_count}, {"eval", rep.eval_count},
                                  {"probe_accuracy", rep.probe_accuracy}}
                       .dump()
                << '\n';
      if (rep.probe_accuracy < 0.9) {
        std::cerr << "mean-colour probe accuracy " << rep.probe_accuracy << " below 0.9\n";
        return 1;
      }
      return 0;
    }
    if (train->parsed()) return dispatch(c.precision, [&](auto t) { return run_train<decltype(t)>(c); });
    if (eval->parsed()) {
      return dispatch(c.precision, [&](auto t) { return run_eval<decltype(t)>(c, checkpoint, split); });
    }
    if (dump->parsed()) {
      return dispatch(c.precision, [&](auto t) {
        return run_dump<decltype(t)>(c, checkpoint, split, sample, query_stage, query_row);
      });
    }
    if (ablate->parsed()) {
      return dispatch(c.precision, [&](auto t) { return run_ablate<decltype(t)>(c, switches, ablate_steps); });
    }
    if (grad->parsed()) {
      if (blocks.empty()) blocks = check_block_names();
      if (c.seed_set) seeds = {c.seed};
      std::ofstream file;
      if (!c.out.empty()) {
        fs::create_directories(c.out);
        file.open(fs::path(c.out) / "grad_check.jsonl");
      }
      bool ok = true;
      for (auto s : seeds) {
        for (const auto& b : blocks) {
          const GradReport r = check_block(b, s, th);
          ok = ok && r.passed;
          std::cout << r.to_json().dump() << '\n';
          if (file.is_open()) file << r.to_json().dump() << '\n';
        }
      }
      return ok ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
