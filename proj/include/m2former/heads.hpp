#pragma once

// Per-stage classifiers, the concatenated classifier, stage-wise label
// smoothing, the summed cross-entropy and the inference aggregate.
//
// Head order everywhere: one head per active stage (ascending), then the
// concatenated head "con". A bare backbone has the single head "global".

#include <cmath>
#include <string>
#include <vector>

#include "m2former/config.hpp"
#include "m2former/layers.hpp"

namespace m2f {

inline constexpr double kLogClamp = 1e-12;

template <typename T>
struct PredictionSet {
  std::vector<Tensor<T>> logits;  // each [n]
  std::vector<Tensor<T>> probs;   // softmax of logits
};

inline std::vector<std::string> head_names(const ModelConfig& cfg) {
  if (cfg.bare_backbone()) return {"head.global"};
  std::vector<std::string> out;
  for (std::size_t s : cfg.active_stages()) out.push_back("head." + stage_name(s));
  out.push_back("head.con");
  return out;
}

// Smoothing factor for each head, in head order: stage i gets alpha_i and the
// concatenated (or global) head gets alpha_con.
inline std::vector<double> head_alphas(const ModelConfig& cfg) {
  std::vector<double> out;
  for (std::size_t s : cfg.active_stages()) out.push_back(cfg.alpha_schedule[s]);
  out.push_back(cfg.alpha_schedule[kNumStages]);
  return out;
}

template <typename T>
void add_head_params(ParamSet<T>& P, const ModelConfig& cfg, Rng& rng) {
  const std::size_t n = cfg.num_classes;
  if (cfg.bare_backbone()) {
    add_linear(P, "head.global", cfg.stage_channels[kNumStages - 1], n, rng);
    return;
  }
  for (std::size_t s : cfg.active_stages()) add_linear(P, "head." + stage_name(s), cfg.stage_channels[s], n, rng);
  add_linear(P, "head.con", cfg.joint_channels(), n, rng);
}

// features[i] is the [1 x c_i] read-out of active stage i (its class token row,
// or the pooled patch mean in global_pool mode).
template <typename T>
PredictionSet<T> stage_predictions(const std::vector<Tensor<T>>& features, const ModelConfig& cfg,
                                   const ParamSet<T>& P) {
  const auto names = head_names(cfg);
  PredictionSet<T> out;
  auto push = [&](const Tensor<T>& f, const std::string& name) {
    Tensor<T> z = linear_forward(f, P, name).reshape({cfg.num_classes});
    out.probs.push_back(softmax_rows(z));
    out.logits.push_back(std::move(z));
  };
  if (cfg.bare_backbone()) {
    push(features.at(0), names[0]);
    return out;
  }
  for (std::size_t i = 0; i < features.size(); ++i) push(features[i], names[i]);
  push(concat(features, 1), names.back());
  return out;
}

template <typename T>
std::vector<Tensor<T>> stage_predictions_backward(const std::vector<Tensor<T>>& features,
                                                  const std::vector<Tensor<T>>& dlogits,
                                                  const ModelConfig& cfg, const ParamSet<T>& P,
                                                  ParamSet<T>& G) {
  const auto names = head_names(cfg);
  const std::size_t n = cfg.num_classes;
  if (cfg.bare_backbone()) {
    return {linear_backward(features.at(0), dlogits[0].reshape({1, n}), P, G, names[0])};
  }
  std::vector<Tensor<T>> dfeat;
  for (std::size_t i = 0; i < features.size(); ++i) {
    dfeat.push_back(linear_backward(features[i], dlogits[i].reshape({1, n}), P, G, names[i]));
  }
  Tensor<T> joint = concat(features, 1);
  Tensor<T> djoint = linear_backward(joint, dlogits.back().reshape({1, n}), P, G, names.back());
  std::vector<std::size_t> widths;
  for (const auto& f : features) widths.push_back(f.cols());
  auto parts = split(djoint, 1, widths);
  for (std::size_t i = 0; i < features.size(); ++i) dfeat[i] += parts[i];
  return dfeat;
}

// ---------------------------------------------------------------------------
// Label smoothing and loss

// target entry alpha, every other entry (1 - alpha) / n; not renormalized.
template <typename T>
Tensor<T> smoothed_label(std::size_t target, double alpha, std::size_t n) {
  if (n == 0 || target >= n) {
    throw LabelError("label " + std::to_string(target) + " outside [0, " + std::to_string(n) + ")");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw LabelError("smoothing factor must lie in [0,1]");
  Tensor<T> y({n}, static_cast<T>((1.0 - alpha) / static_cast<double>(n)));
  y[target] = static_cast<T>(alpha);
  return y;
}

template <typename T>
T cross_entropy(const Tensor<T>& probs, const Tensor<T>& label) {
  T loss{0};
  for (std::size_t t = 0; t < probs.size(); ++t) {
    loss -= label[t] * std::log(std::max(probs[t], static_cast<T>(kLogClamp)));
  }
  return loss;
}

// d cross_entropy / d logits through the softmax. For an unnormalized label of
// mass m this is m * y - label wherever y exceeds the log clamp.
template <typename T>
Tensor<T> cross_entropy_logit_grad(const Tensor<T>& probs, const Tensor<T>& label) {
  const std::size_t n = probs.size();
  Tensor<T> dprob({n});
  for (std::size_t t = 0; t < n; ++t) {
    dprob[t] = probs[t] > static_cast<T>(kLogClamp) ? -label[t] / probs[t] : T{0};
  }
  Tensor<T> dz({n});
  detail::softmax_row_backward(probs.ptr(), dprob.ptr(), dz.ptr(), n);
  return dz;
}

// Sum over heads of the cross-entropy against that head's smoothed label.
template <typename T>
T total_loss(const PredictionSet<T>& pred, std::size_t target, const std::vector<double>& alphas) {
  if (alphas.size() != pred.probs.size()) throw DimensionError("total_loss: one alpha per head expected");
  T loss{0};
  for (std::size_t h = 0; h < pred.probs.size(); ++h) {
    loss += cross_entropy(pred.probs[h], smoothed_label<T>(target, alphas[h], pred.probs[h].size()));
  }
  return loss;
}

template <typename T>
std::vector<Tensor<T>> total_loss_backward(const PredictionSet<T>& pred, std::size_t target,
                                           const std::vector<double>& alphas, T scale = T{1}) {
  std::vector<Tensor<T>> d;
  for (std::size_t h = 0; h < pred.probs.size(); ++h) {
    Tensor<T> g = cross_entropy_logit_grad(
        pred.probs[h], smoothed_label<T>(target, alphas[h], pred.probs[h].size()));
    for (auto& v : g.data()) v *= scale;
    d.push_back(std::move(g));
  }
  return d;
}

// argmax of the summed probability vectors; ties go to the lowest index.
template <typename T>
std::size_t aggregate_inference(const PredictionSet<T>& pred) {
  const std::size_t n = pred.probs.at(0).size();
  std::vector<T> all(n, T{0});
  for (const auto& y : pred.probs) {
    for (std::size_t t = 0; t < n; ++t) all[t] += y[t];
  }
  std::size_t best = 0;
  for (std::size_t t = 1; t < n; ++t) {
    if (all[t] > all[best]) best = t;
  }
  return best;
}

template <typename T>
std::size_t argmax(const Tensor<T>& v) {
  std::size_t best = 0;
  for (std::size_t t = 1; t < v.size(); ++t) {
    if (v[t] > v[best]) best = t;
  }
  return best;
}

}  // namespace m2f
