#pragma once

// Parameterized building blocks shared by the backbone and the cross-scale
// head: linear maps, layer norm, multi-head self-attention, feed-forward and
// the pre-norm encoder block. Parameters live in a ParamSet and are addressed
// by "<prefix>.<tensor>" names; backward passes accumulate into a gradient
// ParamSet with the same names.

#include <cmath>
#include <string>
#include <vector>

#include "m2former/ops.hpp"
#include "m2former/params.hpp"

namespace m2f {

// ---------------------------------------------------------------------------
// Registration

template <typename T>
void add_linear(ParamSet<T>& P, const std::string& pfx, std::size_t in, std::size_t out, Rng& rng,
                bool bias = true) {
  init_trunc_normal(P.add(pfx + ".weight", {in, out}), rng);
  if (bias) P.add(pfx + ".bias", {out});
}

template <typename T>
void add_layernorm(ParamSet<T>& P, const std::string& pfx, std::size_t width) {
  P.add(pfx + ".gamma", {width}, T{1});
  P.add(pfx + ".beta", {width});
}

template <typename T>
void add_ffn(ParamSet<T>& P, const std::string& pfx, std::size_t width, Rng& rng) {
  add_layernorm(P, pfx + ".norm", width);
  add_linear(P, pfx + ".fc1", width, 4 * width, rng);
  add_linear(P, pfx + ".fc2", 4 * width, width, rng);
}

template <typename T>
void add_encoder_block(ParamSet<T>& P, const std::string& pfx, std::size_t width, Rng& rng) {
  add_layernorm(P, pfx + ".norm1", width);
  add_linear(P, pfx + ".attn.qkv", width, 3 * width, rng);
  add_linear(P, pfx + ".attn.proj", width, width, rng);
  add_ffn(P, pfx + ".mlp", width, rng);
}

// ---------------------------------------------------------------------------
// Linear: y = x W + b, W stored [in x out]

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const ParamSet<T>& P, const std::string& pfx) {
  Tensor<T> y = matmul(x, P.at(pfx + ".weight"));
  if (P.contains(pfx + ".bias")) y = add_row_vector(y, P.at(pfx + ".bias"));
  return y;
}

// Returns dx and accumulates dW, db.
template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& dy, const ParamSet<T>& P,
                          ParamSet<T>& G, const std::string& pfx) {
  const Tensor<T>& W = P.at(pfx + ".weight");
  Tensor<T>& dW = G.at(pfx + ".weight");
  detail::gemm_tn(W.dim(0), W.dim(1), x.rows(), x.ptr(), x.cols(), dy.ptr(), dy.cols(), dW.ptr(),
                  W.dim(1), true);
  if (P.contains(pfx + ".bias")) accumulate_col_sum(dy, G.at(pfx + ".bias"));
  return matmul_nt(dy, W);
}

// Column-vector convention: y = x W^T with W stored [out x in], bias-free.
template <typename T>
Tensor<T> linear_t_forward(const Tensor<T>& x, const Tensor<T>& W) {
  return matmul_nt(x, W);
}

template <typename T>
Tensor<T> linear_t_backward(const Tensor<T>& x, const Tensor<T>& dy, const Tensor<T>& W,
                            Tensor<T>& dW) {
  detail::gemm_tn(W.dim(0), W.dim(1), x.rows(), dy.ptr(), dy.cols(), x.ptr(), x.cols(), dW.ptr(),
                  W.dim(1), true);
  return matmul(dy, W);
}

enum class Phase { Train, Eval };

// Batch normalization addressed by prefix: "<pfx>.gamma", "<pfx>.beta" in P and
// "<pfx>.running_mean", "<pfx>.running_var" in the buffer set.
template <typename T>
void add_batchnorm(ParamSet<T>& P, ParamSet<T>& buffers, const std::string& pfx, std::size_t width) {
  P.add(pfx + ".gamma", {width}, T{1});
  P.add(pfx + ".beta", {width});
  buffers.add(pfx + ".running_mean", {width});
  buffers.add(pfx + ".running_var", {width}, T{1});
}

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const ParamSet<T>& P, const ParamSet<T>& buffers,
                            const std::string& pfx, Phase phase, BatchNormCache<T>& cache) {
  if (phase == Phase::Train) return batchnorm_train(x, P.at(pfx + ".gamma"), P.at(pfx + ".beta"), cache);
  return batchnorm_eval(x, P.at(pfx + ".gamma"), P.at(pfx + ".beta"),
                        buffers.at(pfx + ".running_mean"), buffers.at(pfx + ".running_var"));
}

template <typename T>
Tensor<T> batchnorm_backward_into(const BatchNormCache<T>& cache, const Tensor<T>& dy,
                                  const ParamSet<T>& P, ParamSet<T>& G, const std::string& pfx) {
  auto g = batchnorm_backward(cache, P.at(pfx + ".gamma"), dy);
  G.at(pfx + ".gamma") += g.dgamma;
  G.at(pfx + ".beta") += g.dbeta;
  return std::move(g.dx);
}

template <typename T>
Tensor<T> layernorm_forward(const Tensor<T>& x, const ParamSet<T>& P, const std::string& pfx,
                            LayerNormCache<T>& cache) {
  return layernorm(x, P.at(pfx + ".gamma"), P.at(pfx + ".beta"), cache);
}

template <typename T>
Tensor<T> layernorm_backward_into(const LayerNormCache<T>& cache, const Tensor<T>& dy,
                                  const ParamSet<T>& P, ParamSet<T>& G, const std::string& pfx) {
  auto g = layernorm_backward(cache, P.at(pfx + ".gamma"), dy);
  G.at(pfx + ".gamma") += g.dgamma;
  G.at(pfx + ".beta") += g.dbeta;
  return std::move(g.dx);
}

// ---------------------------------------------------------------------------
// Multi-head self-attention over the rows of x[L x c]

template <typename T>
struct AttentionCache {
  Tensor<T> x;
  Tensor<T> qkv;                 // [L x 3c], columns q | k | v
  std::vector<Tensor<T>> probs;  // per head [L x L]
  Tensor<T> ctx;                 // [L x c]
};

// With cache == nullptr the attention matrix is evaluated in row blocks and
// never materialized, which keeps full-scale inference within memory.
template <typename T>
Tensor<T> mhsa_forward(const Tensor<T>& x, std::size_t heads, const ParamSet<T>& P,
                       const std::string& pfx, AttentionCache<T>* cache) {
  const std::size_t L = x.rows(), c = x.cols();
  if (heads == 0 || c % heads != 0) throw ConfigError("mhsa: width not divisible by heads");
  const std::size_t dh = c / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  Tensor<T> qkv = linear_forward(x, P, pfx + ".qkv");
  Tensor<T> ctx({L, c});
  const std::size_t ld = 3 * c;
  if (cache) cache->probs.clear();
  const std::size_t block = cache ? L : std::min<std::size_t>(L, 256);
  std::vector<T> kt(dh * L);
  std::vector<T> scores(block * L);
  for (std::size_t h = 0; h < heads; ++h) {
    const T* q = qkv.ptr() + h * dh;
    const T* k = qkv.ptr() + c + h * dh;
    const T* v = qkv.ptr() + 2 * c + h * dh;
    for (std::size_t j = 0; j < L; ++j) {
      for (std::size_t t = 0; t < dh; ++t) kt[t * L + j] = k[j * ld + t] * scale;
    }
    for (std::size_t r0 = 0; r0 < L; r0 += block) {
      const std::size_t rows = std::min(block, L - r0);
      T* s = scores.data();
      Tensor<T> probs;
      if (cache) {
        probs = Tensor<T>({L, L});
        s = probs.ptr();
      }
      detail::gemm_nn(rows, L, dh, q + r0 * ld, ld, kt.data(), L, s, L, false);
      for (std::size_t i = 0; i < rows; ++i) detail::softmax_row(s + i * L, L);
      detail::gemm_nn(rows, dh, L, s, L, v, ld, ctx.ptr() + r0 * c + h * dh, c, false);
      if (cache) cache->probs.push_back(std::move(probs));
    }
  }
  require_finite(ctx, "mhsa_forward");
  Tensor<T> out = linear_forward(ctx, P, pfx + ".proj");
  if (cache) {
    cache->x = x;
    cache->qkv = std::move(qkv);
    cache->ctx = std::move(ctx);
  }
  return out;
}

template <typename T>
Tensor<T> mhsa_backward(const AttentionCache<T>& cache, const Tensor<T>& dout, std::size_t heads,
                        const ParamSet<T>& P, ParamSet<T>& G, const std::string& pfx) {
  const std::size_t L = cache.x.rows(), c = cache.x.cols();
  const std::size_t dh = c / heads;
  const std::size_t ld = 3 * c;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  Tensor<T> dctx = linear_backward(cache.ctx, dout, P, G, pfx + ".proj");
  Tensor<T> dqkv({L, ld});
  Tensor<T> dp({L, L});
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor<T>& probs = cache.probs[h];
    const T* q = cache.qkv.ptr() + h * dh;
    const T* k = cache.qkv.ptr() + c + h * dh;
    const T* v = cache.qkv.ptr() + 2 * c + h * dh;
    const T* dctx_h = dctx.ptr() + h * dh;
    detail::gemm_nt(L, L, dh, dctx_h, c, v, ld, dp.ptr(), L, false);
    detail::gemm_tn(L, dh, L, probs.ptr(), L, dctx_h, c, dqkv.ptr() + 2 * c + h * dh, ld, true);
    for (std::size_t i = 0; i < L; ++i) {
      T* row = dp.ptr() + i * L;
      detail::softmax_row_backward(probs.ptr() + i * L, row, row, L);
      for (std::size_t j = 0; j < L; ++j) row[j] *= scale;
    }
    detail::gemm_nn(L, dh, L, dp.ptr(), L, k, ld, dqkv.ptr() + h * dh, ld, true);
    detail::gemm_tn(L, dh, L, dp.ptr(), L, q, ld, dqkv.ptr() + c + h * dh, ld, true);
  }
  return linear_backward(cache.x, dqkv, P, G, pfx + ".qkv");
}

// ---------------------------------------------------------------------------
// Feed-forward with residual: out = x + fc2(gelu(fc1(LN(x)))), expansion 4

template <typename T>
struct FfnCache {
  LayerNormCache<T> ln;
  Tensor<T> normed;
  Tensor<T> pre;  // fc1 output before GELU
  Tensor<T> act;
};

template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const ParamSet<T>& P, const std::string& pfx,
                      FfnCache<T>* cache) {
  FfnCache<T> local;
  FfnCache<T>& c = cache ? *cache : local;
  c.normed = layernorm_forward(x, P, pfx + ".norm", c.ln);
  c.pre = linear_forward(c.normed, P, pfx + ".fc1");
  c.act = gelu(c.pre);
  return add(x, linear_forward(c.act, P, pfx + ".fc2"));
}

template <typename T>
Tensor<T> ffn_backward(const FfnCache<T>& c, const Tensor<T>& dout, const ParamSet<T>& P,
                       ParamSet<T>& G, const std::string& pfx) {
  Tensor<T> dact = linear_backward(c.act, dout, P, G, pfx + ".fc2");
  Tensor<T> dpre = gelu_backward(c.pre, dact);
  Tensor<T> dnormed = linear_backward(c.normed, dpre, P, G, pfx + ".fc1");
  Tensor<T> dx = layernorm_backward_into(c.ln, dnormed, P, G, pfx + ".norm");
  dx += dout;
  return dx;
}

// ---------------------------------------------------------------------------
// Pre-norm encoder block: x + MSA(LN(x)), then the residual feed-forward

template <typename T>
struct BlockCache {
  LayerNormCache<T> ln1;
  AttentionCache<T> attn;
  FfnCache<T> ffn;
};

template <typename T>
Tensor<T> encoder_block_forward(const Tensor<T>& x, std::size_t heads, const ParamSet<T>& P,
                                const std::string& pfx, BlockCache<T>* cache) {
  LayerNormCache<T> ln_local;
  Tensor<T> normed = layernorm_forward(x, P, pfx + ".norm1", cache ? cache->ln1 : ln_local);
  Tensor<T> mid = add(x, mhsa_forward(normed, heads, P, pfx + ".attn", cache ? &cache->attn : nullptr));
  return ffn_forward(mid, P, pfx + ".mlp", cache ? &cache->ffn : nullptr);
}

template <typename T>
Tensor<T> encoder_block_backward(const BlockCache<T>& cache, const Tensor<T>& dout,
                                 std::size_t heads, const ParamSet<T>& P, ParamSet<T>& G,
                                 const std::string& pfx) {
  Tensor<T> dmid = ffn_backward(cache.ffn, dout, P, G, pfx + ".mlp");
  Tensor<T> dnormed = mhsa_backward(cache.attn, dmid, heads, P, G, pfx + ".attn");
  Tensor<T> dx = layernorm_backward_into(cache.ln1, dnormed, P, G, pfx + ".norm1");
  dx += dmid;
  return dx;
}

}  // namespace m2f
