#pragma once

// Training loop (SGD with momentum, cosine-decayed learning rate) and
// evaluation with per-head, aggregate and per-scale-bucket accuracy.
//
// Metrics go to metrics.jsonl, one record per evaluation step, and contain no
// timing so that reruns are byte-identical; wall time goes to timing.jsonl.
// Batch-norm running statistics are recomputed over the training set before
// every evaluation, so saved checkpoints carry population statistics.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "m2former/checkpoint.hpp"
#include "m2former/data.hpp"
#include "m2former/model.hpp"

namespace m2f {

template <typename T>
std::vector<Tensor<T>> dataset_images(const Dataset& ds) {
  std::vector<Tensor<T>> out;
  out.reserve(ds.size());
  for (const auto& s : ds.samples) out.push_back(s.image.template cast<T>());
  return out;
}

struct EvalMetrics {
  std::size_t count = 0;
  double loss = 0.0;
  std::vector<std::string> head_names;
  std::vector<double> head_acc;
  double agg_acc = 0.0;
  std::array<std::size_t, 3> bucket_count{0, 0, 0};
  std::array<std::optional<double>, 3> bucket_acc;  // empty bucket = no value

  nlohmann::json to_json() const {
    nlohmann::json heads = nlohmann::json::object();
    for (std::size_t i = 0; i < head_names.size(); ++i) heads[head_names[i]] = head_acc[i];
    nlohmann::json buckets = nlohmann::json::object(), counts = nlohmann::json::object();
    for (std::size_t b = 0; b < 3; ++b) {
      const char* key = to_string(static_cast<ScaleBucket>(b));
      buckets[key] = bucket_acc[b] ? nlohmann::json(*bucket_acc[b]) : nlohmann::json(nullptr);
      counts[key] = bucket_count[b];
    }
    return {{"count", count},       {"loss", loss},           {"head_acc", heads},
            {"agg_acc", agg_acc},   {"bucket_acc", buckets},  {"bucket_count", counts}};
  }
};

template <typename T>
EvalMetrics evaluate_model(const Model<T>& model, const Dataset& ds, const std::vector<Tensor<T>>& images,
                           std::size_t batch = 16) {
  const ModelConfig& cfg = model.config();
  EvalMetrics m;
  m.count = ds.size();
  m.head_names = head_names(cfg);
  m.head_acc.assign(m.head_names.size(), 0.0);
  std::vector<bool> agg_correct(ds.size(), false);
  std::vector<std::size_t> labels(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    labels[i] = ds.samples[i].label;
    if (labels[i] >= cfg.num_classes) throw LabelError("dataset label exceeds num_classes");
  }
  const auto alphas = model.loss_alphas();
  double loss_sum = 0.0;
  for (std::size_t b0 = 0; b0 < ds.size(); b0 += batch) {
    const std::size_t n = std::min(batch, ds.size() - b0);
    std::vector<const Tensor<T>*> ptrs;
    for (std::size_t i = 0; i < n; ++i) ptrs.push_back(&images[b0 + i]);
    auto st = model.forward(ptrs, Phase::Eval);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& pred = st.predictions[i];
      const std::size_t y = labels[b0 + i];
      loss_sum += static_cast<double>(total_loss(pred, y, alphas));
      for (std::size_t h = 0; h < pred.probs.size(); ++h) m.head_acc[h] += argmax(pred.probs[h]) == y;
      agg_correct[b0 + i] = aggregate_inference(pred) == y;
    }
  }
  const double N = static_cast<double>(ds.size());
  m.loss = loss_sum / N;
  for (auto& a : m.head_acc) a /= N;
  std::size_t correct = 0;
  for (bool c : agg_correct) correct += c;
  m.agg_acc = static_cast<double>(correct) / N;
  if (ds.size() >= 4) {
    const auto buckets = bucket_dataset(ds);
    std::array<std::size_t, 3> hits{0, 0, 0};
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto b = static_cast<std::size_t>(buckets.labels[i]);
      ++m.bucket_count[b];
      hits[b] += agg_correct[i];
    }
    for (std::size_t b = 0; b < 3; ++b) {
      if (m.bucket_count[b] > 0) m.bucket_acc[b] = static_cast<double>(hits[b]) / m.bucket_count[b];
    }
  }
  return m;
}

template <typename T>
EvalMetrics evaluate_model(const Model<T>& model, const Dataset& ds, std::size_t batch = 16) {
  return evaluate_model(model, ds, dataset_images<T>(ds), batch);
}

inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

struct TrainOptions {
  std::string out_dir;              // empty: no files written
  const Dataset* eval_set = nullptr;
  std::size_t eval_batch = 16;
  std::ostream* log = nullptr;      // human-readable progress
};

struct TrainResult {
  std::size_t steps_run = 0;
  bool reached_target = false;
  std::vector<nlohmann::json> metrics;  // one record per evaluation
  EvalMetrics final_train;
  double wall_seconds = 0.0;
};

template <typename T>
TrainResult train_model(Model<T>& model, const Dataset& train_set, const TrainOptions& opt = {}) {
  const ModelConfig& cfg = model.config();
  cfg.validate();
  if (train_set.size() < cfg.batch_size) throw ConfigError("training set smaller than one batch");
  if (train_set.height != cfg.input_size || train_set.width != cfg.input_size ||
      train_set.channels != cfg.in_channels) {
    throw DimensionError("dataset geometry does not match config input");
  }
  const auto t_start = std::chrono::steady_clock::now();
  const auto train_images = dataset_images<T>(train_set);
  std::vector<Tensor<T>> eval_images;
  if (opt.eval_set) eval_images = dataset_images<T>(*opt.eval_set);

  std::ofstream metrics_file, timing_file;
  std::string ckpt_path;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    const std::filesystem::path dir(opt.out_dir);
    metrics_file.open(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    timing_file.open(dir / "timing.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics_file || !timing_file) throw IoError("cannot write metrics under " + opt.out_dir);
    ckpt_path = (dir / "checkpoint.m2ck").string();
  }

  Rng order_rng(cfg.seed ^ 0xD1B54A32D192ED03ull);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();  // forces a shuffle on the first batch

  ParamSet<T> velocity = model.params().zeros_like();
  TrainResult result;
  std::optional<double> last_batch_loss;

  auto record = [&](std::size_t step, double lr) {
    model.recalibrate_batchnorm(train_images, cfg.batch_size);
    EvalMetrics tr = evaluate_model(model, train_set, train_images, opt.eval_batch);
    nlohmann::json rec{{"step", step},
                       {"lr", lr},
                       {"batch_loss", last_batch_loss ? nlohmann::json(*last_batch_loss) : nlohmann::json(nullptr)},
                       {"train", tr.to_json()},
                       {"seed", cfg.seed},
                       {"config_hash", hash_hex(cfg.hash())}};
    if (opt.eval_set) rec["eval"] = evaluate_model(model, *opt.eval_set, eval_images, opt.eval_batch).to_json();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    if (metrics_file.is_open()) {
      metrics_file << rec.dump() << '\n';
      metrics_file.flush();
      timing_file << nlohmann::json{{"step", step}, {"wall_seconds", wall}}.dump() << '\n';
      timing_file.flush();
      save_checkpoint(ckpt_path, model, step);
    }
    if (opt.log) {
      *opt.log << "step " << step << "  loss " << tr.loss << "  train_acc " << tr.agg_acc;
      if (opt.eval_set) *opt.log << "  eval_acc " << rec["eval"]["agg_acc"].get<double>();
      *opt.log << "  (" << wall << " s)\n" << std::flush;
    }
    result.metrics.push_back(rec);
    result.final_train = tr;
    return tr.agg_acc;
  };

  record(0, cosine_lr(cfg.learning_rate, 0, cfg.steps));
  std::vector<std::size_t> labels(cfg.batch_size);
  std::vector<const Tensor<T>*> ptrs(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (cursor + cfg.batch_size > order.size()) {
      order_rng.shuffle(order.begin(), order.end());
      cursor = 0;
    }
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const std::size_t idx = order[cursor++];
      ptrs[i] = &train_images[idx];
      labels[i] = train_set.samples[idx].label;
    }
    const double lr = cosine_lr(cfg.learning_rate, step - 1, cfg.steps);
    auto st = model.forward(ptrs, Phase::Train, {true, true});
    last_batch_loss = static_cast<double>(model.loss(st, labels));
    if (!std::isfinite(*last_batch_loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
    ParamSet<T> grads = model.params().zeros_like();
    model.backward(st, labels, grads);
    model.commit_running_stats(st);
    auto& P = model.params();
    const T mu = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay), eta = static_cast<T>(lr);
    for (std::size_t i = 0; i < P.size(); ++i) {
      auto p = P.value(i).data();
      auto g = grads.value(i).data();
      auto v = velocity.value(i).data();
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = mu * v[j] + g[j] + wd * p[j];
        p[j] -= eta * v[j];
      }
    }
    result.steps_run = step;
    if (step % cfg.eval_interval == 0 || step == cfg.steps) {
      const double acc = record(step, cosine_lr(cfg.learning_rate, step, cfg.steps));
      if (cfg.target_accuracy > 0.0 && step >= cfg.min_steps && acc >= cfg.target_accuracy) {
        result.reached_target = true;
        break;
      }
    }
  }
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

}  // namespace m2f
