#pragma once

// Class token transfer. The global class token (stage-4 CLS, width c4) is
// projected to each earlier stage's width:
//   ctt_2mlp: cls_i = W1_i ReLU(BN(W0_i cls_g)),  W0_i [2c_i x c4], W1_i [c_i x 2c_i]
//   ctt_1mlp: cls_i = W_i cls_g,                  W_i  [c_i x c4]
// Stage 4 uses cls_g unchanged. Batch normalization runs over the batch of
// class tokens, so the forward pass is batched: rows of `cls_g` are samples.

#include <string>
#include <vector>

#include "m2former/config.hpp"
#include "m2former/layers.hpp"

namespace m2f {

inline std::string transfer_prefix(std::size_t stage) { return "transfer." + stage_name(stage); }

template <typename T>
void add_transfer_params(ParamSet<T>& P, ParamSet<T>& buffers, const ModelConfig& cfg, Rng& rng) {
  const std::size_t c4 = cfg.stage_channels[kNumStages - 1];
  for (std::size_t s : cfg.active_stages()) {
    if (s + 1 == kNumStages) continue;
    const std::size_t c = cfg.stage_channels[s];
    const std::string pfx = transfer_prefix(s);
    if (cfg.ctt_mode == AttachMode::Ctt2Mlp) {
      init_trunc_normal(P.add(pfx + ".w0", {2 * c, c4}), rng);
      add_batchnorm(P, buffers, pfx + ".bn", 2 * c);
      init_trunc_normal(P.add(pfx + ".w1", {c, 2 * c}), rng);
    } else if (cfg.ctt_mode == AttachMode::Ctt1Mlp) {
      init_trunc_normal(P.add(pfx + ".w", {c, c4}), rng);
    }
  }
}

template <typename T>
struct TransferCache {
  AttachMode mode = AttachMode::Ctt2Mlp;
  Tensor<T> input;  // [B x c4]
  Tensor<T> hidden;  // W0 cls_g
  BatchNormCache<T> bn;
  Tensor<T> normed;
  Tensor<T> activated;
};

// cls_g [B x c4] -> [B x c_i] for stage s in {0,1,2}.
template <typename T>
Tensor<T> transfer_cls(const Tensor<T>& cls_g, std::size_t s, AttachMode mode, const ParamSet<T>& P,
                       const ParamSet<T>& buffers, Phase phase, TransferCache<T>* cache) {
  const std::string pfx = transfer_prefix(s);
  if (mode == AttachMode::Ctt1Mlp) {
    if (cache) {
      cache->mode = mode;
      cache->input = cls_g;
    }
    return linear_t_forward(cls_g, P.at(pfx + ".w"));
  }
  if (mode != AttachMode::Ctt2Mlp) throw ConfigError("transfer_cls: mode has no projection");
  TransferCache<T> local;
  TransferCache<T>& c = cache ? *cache : local;
  c.mode = mode;
  c.input = cls_g;
  c.hidden = linear_t_forward(cls_g, P.at(pfx + ".w0"));
  c.normed = batchnorm_forward(c.hidden, P, buffers, pfx + ".bn", phase, c.bn);
  c.activated = relu(c.normed);
  return linear_t_forward(c.activated, P.at(pfx + ".w1"));
}

template <typename T>
Tensor<T> transfer_cls_backward(const TransferCache<T>& c, const Tensor<T>& dout, std::size_t s,
                                const ParamSet<T>& P, ParamSet<T>& G) {
  const std::string pfx = transfer_prefix(s);
  if (c.mode == AttachMode::Ctt1Mlp) {
    return linear_t_backward(c.input, dout, P.at(pfx + ".w"), G.at(pfx + ".w"));
  }
  Tensor<T> dact = linear_t_backward(c.activated, dout, P.at(pfx + ".w1"), G.at(pfx + ".w1"));
  Tensor<T> dnormed = relu_backward(c.normed, dact);
  Tensor<T> dhidden = batchnorm_backward_into(c.bn, dnormed, P, G, pfx + ".bn");
  return linear_t_backward(c.input, dhidden, P.at(pfx + ".w0"), G.at(pfx + ".w0"));
}

// The class token is stored as the last row.
template <typename T>
Tensor<T> attach_cls(const Tensor<T>& patches, const Tensor<T>& cls) {
  if (patches.cols() != cls.size()) {
    throw DimensionError("attach_cls: patch width " + std::to_string(patches.cols()) +
                         " vs class token width " + std::to_string(cls.size()));
  }
  return concat<T>({patches, cls.reshape({1, cls.size()})}, 0);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> detach_cls(const Tensor<T>& tokens) {
  if (tokens.rows() < 2) throw DimensionError("detach_cls: need at least one patch row and the class row");
  auto parts = split(tokens, 0, {tokens.rows() - 1, 1});
  return {std::move(parts[0]), std::move(parts[1]).reshape({tokens.cols()})};
}

}  // namespace m2f
