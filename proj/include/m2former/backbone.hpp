#pragma once

// Simplified four-stage multi-scale transformer. Stage i (0-based here, named
// "stage{i+1}" in parameter names) runs plain pre-norm encoder blocks over its
// h_i*w_i grid tokens plus the class token (kept as the last row), then halves
// the grid with 2x2 average pooling and doubles the channel width with a
// learned linear map. The class token is re-projected at each boundary.
//
// Parameter names:
//   patch_embed.{weight,bias,pos}, cls_token
//   stage{i}.block{j}.{norm1,attn.qkv,attn.proj,mlp.norm,mlp.fc1,mlp.fc2}.*
//   stage{i}.down.{weight,bias}, stage{i}.cls_proj.{weight,bias}   (i < 4)

#include <array>
#include <string>
#include <vector>

#include "m2former/config.hpp"
#include "m2former/layers.hpp"

namespace m2f {

inline constexpr std::size_t kPatchSize = 4;

template <typename T>
struct StageOutput {
  Tensor<T> features;  // [h x w x c]
  Tensor<T> cls;       // [c]
};

inline std::string block_name(std::size_t stage, std::size_t block) {
  return stage_name(stage) + ".block" + std::to_string(block);
}

template <typename T>
void add_backbone_params(ParamSet<T>& P, const ModelConfig& cfg, Rng& rng) {
  const std::size_t c1 = cfg.stage_channels[0];
  const std::size_t patch_dim = kPatchSize * kPatchSize * cfg.in_channels;
  add_linear(P, "patch_embed", patch_dim, c1, rng);
  init_trunc_normal(P.add("patch_embed.pos", {cfg.grid_tokens(0), c1}), rng);
  init_trunc_normal(P.add("cls_token", {c1}), rng);
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::size_t c = cfg.stage_channels[s];
    for (std::size_t j = 0; j < cfg.stage_depths[s]; ++j) add_encoder_block(P, block_name(s, j), c, rng);
    if (s + 1 < kNumStages) {
      add_linear(P, stage_name(s) + ".down", c, cfg.stage_channels[s + 1], rng);
      add_linear(P, stage_name(s) + ".cls_proj", c, cfg.stage_channels[s + 1], rng);
    }
  }
}

// ---------------------------------------------------------------------------
// Patch embedding

// Flattens each non-overlapping 4x4xc0 block in (dy, dx, channel) order.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& image) {
  detail::require_rank(image.shape(), 3, "patch_embed");
  const std::size_t h = image.dim(0), w = image.dim(1), c0 = image.dim(2);
  if (h % kPatchSize != 0 || w % kPatchSize != 0) {
    throw ConfigError("patch_embed: image " + shape_str(image.shape()) +
                      " not divisible by the 4x4 patch size");
  }
  const std::size_t ph = h / kPatchSize, pw = w / kPatchSize;
  Tensor<T> patches({ph * pw, kPatchSize * kPatchSize * c0});
  for (std::size_t py = 0; py < ph; ++py) {
    for (std::size_t px = 0; px < pw; ++px) {
      T* dst = patches.row(py * pw + px);
      for (std::size_t dy = 0; dy < kPatchSize; ++dy) {
        const T* src = image.ptr() + ((py * kPatchSize + dy) * w + px * kPatchSize) * c0;
        std::copy(src, src + kPatchSize * c0, dst + dy * kPatchSize * c0);
      }
    }
  }
  return patches;
}

template <typename T>
Tensor<T> scatter_patches(const Tensor<T>& dpatches, std::size_t h, std::size_t w, std::size_t c0) {
  const std::size_t pw = w / kPatchSize;
  Tensor<T> image({h, w, c0});
  for (std::size_t p = 0; p < dpatches.rows(); ++p) {
    const std::size_t py = p / pw, px = p % pw;
    const T* src = dpatches.row(p);
    for (std::size_t dy = 0; dy < kPatchSize; ++dy) {
      T* dst = image.ptr() + ((py * kPatchSize + dy) * w + px * kPatchSize) * c0;
      std::copy(src + dy * kPatchSize * c0, src + (dy + 1) * kPatchSize * c0, dst);
    }
  }
  return image;
}

template <typename T>
struct PatchEmbedCache {
  Tensor<T> patches;
};

// Returns grid tokens [(h0/4)*(w0/4) x c1] including the positional term.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, const ParamSet<T>& P, PatchEmbedCache<T>* cache) {
  Tensor<T> patches = extract_patches(image);
  const Tensor<T>& pos = P.at("patch_embed.pos");
  if (pos.rows() != patches.rows()) {
    throw DimensionError("patch_embed: image " + shape_str(image.shape()) +
                         " does not match the configured input size");
  }
  Tensor<T> tokens = add(linear_forward(patches, P, "patch_embed"), pos);
  if (cache) cache->patches = std::move(patches);
  return tokens;
}

// Accumulates parameter gradients; returns the image gradient.
template <typename T>
Tensor<T> patch_embed_backward(const PatchEmbedCache<T>& cache, const Tensor<T>& dtokens,
                               const Shape& image_shape, const ParamSet<T>& P, ParamSet<T>& G) {
  G.at("patch_embed.pos") += dtokens;
  Tensor<T> dpatches = linear_backward(cache.patches, dtokens, P, G, "patch_embed");
  return scatter_patches(dpatches, image_shape[0], image_shape[1], image_shape[2]);
}

// ---------------------------------------------------------------------------
// Stages

template <typename T>
struct StageCache {
  std::vector<BlockCache<T>> blocks;
  Tensor<T> pooled;   // [l/4 x c] input of the down projection
  Tensor<T> cls_out;  // [1 x c] input of the class-token projection
};

template <typename T>
struct StageResult {
  StageOutput<T> output;  // after the encoder blocks
  StageOutput<T> next;    // input of the following stage (empty for the last)
};

namespace detail {

template <typename T>
Tensor<T> join_tokens(const Tensor<T>& grid_tokens, const Tensor<T>& cls) {
  return concat<T>({grid_tokens, cls.reshape({1, cls.size()})}, 0);
}

}  // namespace detail

template <typename T>
StageResult<T> run_stage(const StageOutput<T>& input, const ParamSet<T>& P, const ModelConfig& cfg,
                         std::size_t s, StageCache<T>* cache) {
  const std::size_t side = cfg.grid_side(s), c = cfg.stage_channels[s];
  const Shape grid_shape{side, side, c};
  if (input.features.shape() != grid_shape || input.cls.size() != c) {
    throw DimensionError(stage_name(s) + ": expected grid " + shape_str(grid_shape) + " and cls [" +
                         std::to_string(c) + "], got " + shape_str(input.features.shape()) +
                         " and " + shape_str(input.cls.shape()));
  }
  const std::size_t l = side * side;
  Tensor<T> x = detail::join_tokens(input.features.reshape({l, c}), input.cls);
  if (cache) cache->blocks.assign(cfg.stage_depths[s], {});
  for (std::size_t j = 0; j < cfg.stage_depths[s]; ++j) {
    x = encoder_block_forward(x, cfg.stage_heads[s], P, block_name(s, j),
                              cache ? &cache->blocks[j] : nullptr);
  }
  auto parts = split(x, 0, {l, 1});
  StageResult<T> res;
  res.output.cls = parts[1].reshape({c});
  if (s + 1 < kNumStages) {
    Tensor<T> pooled = block_mean_pool(parts[0], side, side, 2);
    res.next.features = linear_forward(pooled, P, stage_name(s) + ".down")
                            .reshape({side / 2, side / 2, cfg.stage_channels[s + 1]});
    res.next.cls = linear_forward(parts[1], P, stage_name(s) + ".cls_proj").reshape({cfg.stage_channels[s + 1]});
    if (cache) {
      cache->pooled = std::move(pooled);
      cache->cls_out = parts[1];
    }
  }
  res.output.features = std::move(parts[0]).reshape(grid_shape);
  return res;
}

// Gradient of a stage with respect to its input, given gradients on its
// output and (for s < 3) on the next stage's input. Empty tensors mean zero.
template <typename T>
StageOutput<T> run_stage_backward(const StageCache<T>& cache, const StageOutput<T>& d_output,
                                  const StageOutput<T>& d_next, const ParamSet<T>& P,
                                  ParamSet<T>& G, const ModelConfig& cfg, std::size_t s) {
  const std::size_t side = cfg.grid_side(s), c = cfg.stage_channels[s], l = side * side;
  Tensor<T> dgrid({l, c});
  Tensor<T> dcls({1, c});
  if (!d_output.features.empty()) dgrid += d_output.features.reshape({l, c});
  if (!d_output.cls.empty()) dcls += d_output.cls.reshape({1, c});
  if (s + 1 < kNumStages && !d_next.features.empty()) {
    const std::size_t cn = cfg.stage_channels[s + 1];
    Tensor<T> dnext_grid = d_next.features.reshape({l / 4, cn});
    Tensor<T> dpooled = linear_backward(cache.pooled, dnext_grid, P, G, stage_name(s) + ".down");
    dgrid += block_mean_pool_backward(dpooled, side, side, 2);
    dcls += linear_backward(cache.cls_out, d_next.cls.reshape({1, cn}), P, G, stage_name(s) + ".cls_proj");
  }
  Tensor<T> dx = concat<T>({dgrid, dcls}, 0);
  for (std::size_t j = cfg.stage_depths[s]; j-- > 0;) {
    dx = encoder_block_backward(cache.blocks[j], dx, cfg.stage_heads[s], P, G, block_name(s, j));
  }
  auto parts = split(dx, 0, {l, 1});
  return {std::move(parts[0]).reshape({side, side, c}), std::move(parts[1]).reshape({c})};
}

// ---------------------------------------------------------------------------
// Full backbone

template <typename T>
struct BackboneCache {
  PatchEmbedCache<T> embed;
  std::array<StageCache<T>, kNumStages> stages;
};

// Returns the four stage outputs; outputs[3].cls is the global class token.
template <typename T>
std::array<StageOutput<T>, kNumStages> forward_backbone(const Tensor<T>& image, const ParamSet<T>& P,
                                                        const ModelConfig& cfg,
                                                        BackboneCache<T>* cache) {
  const Shape expected{cfg.input_size, cfg.input_size, cfg.in_channels};
  if (image.shape() != expected) {
    throw DimensionError("forward_backbone: expected image " + shape_str(expected) + ", got " +
                         shape_str(image.shape()));
  }
  const std::size_t side = cfg.grid_side(0);
  StageOutput<T> input{patch_embed(image, P, cache ? &cache->embed : nullptr)
                           .reshape({side, side, cfg.stage_channels[0]}),
                       P.at("cls_token")};
  std::array<StageOutput<T>, kNumStages> outputs;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    auto res = run_stage(input, P, cfg, s, cache ? &cache->stages[s] : nullptr);
    outputs[s] = std::move(res.output);
    input = std::move(res.next);
  }
  return outputs;
}

// d_outputs[s] holds the gradient on stage s's output (empty = zero).
// Accumulates into G and returns the image gradient.
template <typename T>
Tensor<T> backward_backbone(const BackboneCache<T>& cache,
                            const std::array<StageOutput<T>, kNumStages>& d_outputs,
                            const Shape& image_shape, const ParamSet<T>& P, ParamSet<T>& G,
                            const ModelConfig& cfg) {
  StageOutput<T> d_next;
  for (std::size_t s = kNumStages; s-- > 0;) {
    d_next = run_stage_backward(cache.stages[s], d_outputs[s], d_next, P, G, cfg, s);
  }
  G.at("cls_token") += d_next.cls;
  const std::size_t l = cfg.grid_tokens(0);
  return patch_embed_backward(cache.embed, d_next.features.reshape({l, cfg.stage_channels[0]}),
                              image_shape, P, G);
}

}  // namespace m2f
