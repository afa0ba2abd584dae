#pragma once

// End-to-end operations shared by the command-line tool and the acceptance
// suite: dataset generation, attention/selection dumps, config overrides and
// ablation sweeps.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "m2former/train.hpp"

namespace m2f {

// ---------------------------------------------------------------------------
// Dataset generation

struct GenerateReport {
  std::size_t train_count = 0;
  std::size_t eval_count = 0;
  double probe_accuracy = 0.0;  // mean-colour probe after 2x downscale, on eval
};

inline std::uint64_t eval_split_seed(std::uint64_t seed) { return seed ^ 0x5EED5EED5EED5EEDull; }

// Writes train.{m2ds,m2dx} and eval.{m2ds,m2dx} under dir, plus probe.json.
inline GenerateReport generate_dataset(const std::string& dir, std::size_t n_classes, std::size_t n_per_class,
                                       std::size_t n_eval_per_class, std::size_t image_size, std::uint64_t seed) {
  const Dataset train = generate_split(n_classes, n_per_class, image_size, seed);
  const Dataset eval = generate_split(n_classes, n_eval_per_class, image_size, eval_split_seed(seed));
  save_split(dir, "train", train);
  save_split(dir, "eval", eval);
  GenerateReport rep{train.size(), eval.size(), mean_color_probe(train, eval, n_classes)};
  std::ofstream(std::filesystem::path(dir) / "probe.json")
      << nlohmann::json{{"probe_accuracy", rep.probe_accuracy}, {"train", rep.train_count}, {"eval", rep.eval_count},
                        {"seed", seed}}
             .dump()
      << '\n';
  return rep;
}

// ---------------------------------------------------------------------------
// Attention and selection dumps

struct DumpResult {
  std::vector<AttentionRecord> attention;
  std::vector<SelectionRecord> selection;
};

// Runs one sample in eval mode and writes attention.m2ad, attention.tsv,
// selection.m2sd and selection.tsv under out_dir. query_stage is 1-based;
// query_row indexes the stage's token rows (the class token is the last row).
template <typename T>
DumpResult dump_attention(const Model<T>& model, const Sample& sample, std::size_t query_stage,
                          std::size_t query_row, const std::string& out_dir) {
  const ModelConfig& cfg = model.config();
  if (cfg.bare_backbone() || !cfg.sca) throw ConfigError("dump_attention needs selection and cross-attention on");
  const Tensor<T> image = sample.image.template cast<T>();
  auto st = model.forward({&image}, Phase::Eval, {false, true});
  const auto stages = cfg.active_stages();
  std::vector<IndexList> indices;
  DumpResult res;
  for (const auto& sel : st.samples[0].selections) {
    indices.push_back(sel.indices);
    res.selection.push_back(to_record(sel));
  }
  // maps of the last block, which feeds the heads
  res.attention = extract_attention_maps(st.blocks.back().samples[0].sca, stages, indices, query_stage, query_row);
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  {
    auto os = io::open_out((dir / "attention.m2ad").string());
    write_attention_dump(os, res.attention);
  }
  {
    std::ofstream os(dir / "attention.tsv");
    write_attention_sidecar(os, res.attention);
  }
  {
    auto os = io::open_out((dir / "selection.m2sd").string());
    write_selection_dump(os, res.selection);
  }
  {
    std::ofstream os(dir / "selection.tsv");
    write_selection_sidecar(os, res.selection);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Config overrides and ablation

// Applies "key=value" pairs (separated by ';') on top of base.
inline ModelConfig apply_overrides(const ModelConfig& base, const std::string& overrides) {
  std::string text = base.to_text();
  std::size_t start = 0;
  while (start <= overrides.size()) {
    const std::size_t end = std::min(overrides.find(';', start), overrides.size());
    const std::string item = overrides.substr(start, end - start);
    if (item.find_first_not_of(" \t") != std::string::npos) text += item + '\n';
    start = end + 1;
  }
  return parse_config(text);
}

struct AblationRow {
  std::string variant;
  std::size_t params = 0;
  std::size_t steps = 0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  std::vector<std::string> heads;
  std::vector<double> eval_head_acc;

  nlohmann::json to_json() const {
    return {{"variant", variant},     {"params", params},     {"steps", steps},
            {"train_acc", train_acc}, {"eval_acc", eval_acc}, {"heads", heads},
            {"eval_head_acc", eval_head_acc}};
  }
};

// One train + evaluate run per variant. The variant "base" is the base config
// itself; any other string is an override list.
template <typename T>
std::vector<AblationRow> run_ablation(const ModelConfig& base, const std::vector<std::string>& variants,
                                      const Dataset& train, const Dataset& eval, const std::string& out_dir,
                                      std::ostream* log = nullptr) {
  std::vector<AblationRow> rows;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const ModelConfig cfg = variants[v] == "base" ? base : apply_overrides(base, variants[v]);
    Model<T> model(cfg);
    TrainOptions opt;
    if (!out_dir.empty()) opt.out_dir = (std::filesystem::path(out_dir) / ("variant" + std::to_string(v))).string();
    opt.log = log;
    if (log) *log << "== variant " << v << ": " << variants[v] << '\n';
    const TrainResult tr = train_model(model, train, opt);
    const EvalMetrics em = evaluate_model(model, eval);
    rows.push_back({variants[v], model.params().scalar_count(), tr.steps_run, tr.final_train.agg_acc, em.agg_acc,
                    em.head_names, em.head_acc});
  }
  if (!out_dir.empty()) {
    std::ofstream os(std::filesystem::path(out_dir) / "ablation.jsonl");
    for (const auto& r : rows) os << r.to_json().dump() << '\n';
  }
  return rows;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant\tparams\tsteps\ttrain_acc\teval_acc\n";
  for (const auto& r : rows) {
    os << r.variant << '\t' << r.params << '\t' << r.steps << '\t' << r.train_acc << '\t' << r.eval_acc << '\n';
  }
  return os.str();
}

}  // namespace m2f
