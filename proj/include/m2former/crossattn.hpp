#pragma once

// Multi-scale cross-attention over the per-stage token sets P~_i
// ([k~_i x c_i], one tensor per active stage, ascending stage order).
//
// Channel cross-attention (batched; its BN runs over the batch of joint
// descriptors):
//   D_i = row mean of P~_i,  D = concat(D_1..D_4)  (width c = sum c_i)
//   C   = sigmoid(W1 ReLU(BN(W0 D))),  W0 [c/2 x c], W1 [c x c/2]
//   Y_i = P~_i (*) C_i + P~_i
// Spatial cross-attention (per sample):
//   Q_i, K_i, V_i = Y_i W^{Q,K,V}_i  ([c_i x d], bias-free), K, V = row concat
//   A_i = softmax(Q_i K^T / sqrt(d/h)) V per head, O_i = A_i W^s_i ([d x c_i])
// Block: H_i = Y_i + O_i, out_i = H_i + FFN_i(LN(H_i)).
//
// Parameter names (b = block index):
//   msca.block{b}.cca.{w0,w1}, msca.block{b}.cca.bn.{gamma,beta}
//   msca.block{b}.sca.stage{i}.{q,k,v,out}.weight
//   msca.block{b}.ffn.stage{i}.{norm,fc1,fc2}.*

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "m2former/config.hpp"
#include "m2former/io.hpp"
#include "m2former/layers.hpp"

namespace m2f {

template <typename T>
using StageSet = std::vector<Tensor<T>>;

inline std::string msca_prefix(std::size_t block) { return "msca.block" + std::to_string(block); }

template <typename T>
void add_msca_params(ParamSet<T>& P, ParamSet<T>& buffers, const ModelConfig& cfg, Rng& rng) {
  const auto stages = cfg.active_stages();
  const std::size_t c = cfg.joint_channels(), d = cfg.attention_dim;
  for (std::size_t b = 0; b < cfg.num_msca_blocks; ++b) {
    const std::string pfx = msca_prefix(b);
    if (cfg.cca) {
      init_trunc_normal(P.add(pfx + ".cca.w0", {c / 2, c}), rng);
      add_batchnorm(P, buffers, pfx + ".cca.bn", c / 2);
      init_trunc_normal(P.add(pfx + ".cca.w1", {c, c / 2}), rng);
    }
    for (std::size_t s : stages) {
      const std::size_t ci = cfg.stage_channels[s];
      const std::string sp = pfx + ".sca." + stage_name(s);
      if (cfg.sca) {
        add_linear(P, sp + ".q", ci, d, rng, false);
        add_linear(P, sp + ".k", ci, d, rng, false);
        add_linear(P, sp + ".v", ci, d, rng, false);
        add_linear(P, sp + ".out", d, ci, rng, false);
      }
      add_ffn(P, pfx + ".ffn." + stage_name(s), ci, rng);
    }
  }
}

// ---------------------------------------------------------------------------
// Channel cross-attention

template <typename T>
struct CcaCache {
  std::vector<StageSet<T>> inputs;
  Tensor<T> descriptors;  // [B x c]
  Tensor<T> hidden;
  BatchNormCache<T> bn;
  Tensor<T> normed;
  Tensor<T> activated;
  Tensor<T> gate;  // C, [B x c]
};

// Y_i = P~_i (*) C_i + P~_i with C = concat(C_i) given as one row of width c.
template <typename T>
StageSet<T> cca_recalibrate(const StageSet<T>& tokens, const T* gate) {
  StageSet<T> out;
  std::size_t off = 0;
  for (const auto& p : tokens) {
    Tensor<T> y(p.shape());
    const std::size_t ci = p.cols();
    for (std::size_t r = 0; r < p.rows(); ++r) {
      const T* src = p.row(r);
      T* dst = y.row(r);
      for (std::size_t q = 0; q < ci; ++q) dst[q] = src[q] * gate[off + q] + src[q];
    }
    off += ci;
    out.push_back(std::move(y));
  }
  return out;
}

template <typename T>
Tensor<T> channel_descriptors(const std::vector<StageSet<T>>& batch) {
  std::vector<Tensor<T>> rows;
  for (const auto& sample : batch) {
    std::vector<Tensor<T>> parts;
    for (const auto& p : sample) parts.push_back(mean_axis(p, 0));
    Tensor<T> d = concat(parts, 0);
    rows.push_back(d.reshape({1, d.size()}));
  }
  return concat(rows, 0);
}

template <typename T>
std::vector<StageSet<T>> cca_forward(const std::vector<StageSet<T>>& batch, const ParamSet<T>& P,
                                     const ParamSet<T>& buffers, const std::string& pfx,
                                     Phase phase, CcaCache<T>* cache) {
  CcaCache<T> local;
  CcaCache<T>& c = cache ? *cache : local;
  c.inputs = batch;
  c.descriptors = channel_descriptors(batch);
  const std::size_t width = c.descriptors.cols();
  if (width % 2 != 0) throw ConfigError("cca: joint channel count must be even");
  c.hidden = linear_t_forward(c.descriptors, P.at(pfx + ".w0"));
  c.normed = batchnorm_forward(c.hidden, P, buffers, pfx + ".bn", phase, c.bn);
  c.activated = relu(c.normed);
  c.gate = sigmoid(linear_t_forward(c.activated, P.at(pfx + ".w1")));
  std::vector<StageSet<T>> out;
  for (std::size_t b = 0; b < batch.size(); ++b) out.push_back(cca_recalibrate(batch[b], c.gate.row(b)));
  return out;
}

template <typename T>
std::vector<StageSet<T>> cca_backward(const CcaCache<T>& c, const std::vector<StageSet<T>>& dY,
                                      const ParamSet<T>& P, ParamSet<T>& G, const std::string& pfx) {
  const std::size_t B = c.inputs.size(), width = c.gate.cols();
  Tensor<T> dgate({B, width});
  std::vector<StageSet<T>> dP(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < c.inputs[b].size(); ++i) {
      const Tensor<T>& p = c.inputs[b][i];
      const Tensor<T>& dy = dY[b][i];
      const std::size_t ci = p.cols();
      Tensor<T> dp(p.shape());
      const T* gate = c.gate.row(b) + off;
      T* dg = dgate.row(b) + off;
      for (std::size_t r = 0; r < p.rows(); ++r) {
        for (std::size_t q = 0; q < ci; ++q) {
          dp(r, q) = dy(r, q) * gate[q] + dy(r, q);
          dg[q] += dy(r, q) * p(r, q);
        }
      }
      off += ci;
      dP[b].push_back(std::move(dp));
    }
  }
  Tensor<T> dz = sigmoid_backward(c.gate, dgate);
  Tensor<T> dact = linear_t_backward(c.activated, dz, P.at(pfx + ".w1"), G.at(pfx + ".w1"));
  Tensor<T> dnormed = relu_backward(c.normed, dact);
  Tensor<T> dhidden = batchnorm_backward_into(c.bn, dnormed, P, G, pfx + ".bn");
  Tensor<T> ddesc = linear_t_backward(c.descriptors, dhidden, P.at(pfx + ".w0"), G.at(pfx + ".w0"));
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < c.inputs[b].size(); ++i) {
      Tensor<T>& dp = dP[b][i];
      const std::size_t ci = dp.cols(), rows = dp.rows();
      const T inv = T{1} / static_cast<T>(rows);
      const T* dd = ddesc.row(b) + off;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t q = 0; q < ci; ++q) dp(r, q) += dd[q] * inv;
      }
      off += ci;
    }
  }
  return dP;
}

// ---------------------------------------------------------------------------
// Spatial cross-attention

template <typename T>
struct ScaCache {
  StageSet<T> inputs;
  StageSet<T> queries;
  Tensor<T> keys;    // [k~ x d], stage blocks in ascending order
  Tensor<T> values;  // [k~ x d]
  std::vector<std::vector<Tensor<T>>> probs;  // [stage][head] -> [k~_i x k~]
  StageSet<T> attended;                       // A_i
  std::vector<std::size_t> row_offsets;       // first global key row of each stage
};

template <typename T>
StageSet<T> sca_forward(const StageSet<T>& Y, const std::vector<std::size_t>& stages,
                        std::size_t heads, const ParamSet<T>& P, const std::string& pfx,
                        ScaCache<T>* cache) {
  if (Y.size() != stages.size()) throw DimensionError("sca: one token set per active stage expected");
  const std::string first = pfx + "." + stage_name(stages[0]) + ".q";
  const std::size_t d = P.at(first + ".weight").dim(1);
  if (heads == 0 || d % heads != 0) throw ConfigError("sca: attention_dim not divisible by heads");
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));

  StageSet<T> Q, K, V;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (std::size_t i = 0; i < Y.size(); ++i) {
    const std::string sp = pfx + "." + stage_name(stages[i]);
    Q.push_back(linear_forward(Y[i], P, sp + ".q"));
    K.push_back(linear_forward(Y[i], P, sp + ".k"));
    V.push_back(linear_forward(Y[i], P, sp + ".v"));
    offsets.push_back(total);
    total += Y[i].rows();
  }
  Tensor<T> keys = concat(K, 0);
  Tensor<T> values = concat(V, 0);

  std::vector<std::vector<Tensor<T>>> probs(Y.size());
  StageSet<T> attended, out;
  std::vector<T> kt(dh * total);
  for (std::size_t i = 0; i < Y.size(); ++i) attended.emplace_back(Shape{Y[i].rows(), d});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t j = 0; j < total; ++j) {
      for (std::size_t t = 0; t < dh; ++t) kt[t * total + j] = keys(j, h * dh + t) * scale;
    }
    for (std::size_t i = 0; i < Y.size(); ++i) {
      const std::size_t rows = Y[i].rows();
      Tensor<T> p({rows, total});
      detail::gemm_nn(rows, total, dh, Q[i].ptr() + h * dh, d, kt.data(), total, p.ptr(), total, false);
      for (std::size_t r = 0; r < rows; ++r) detail::softmax_row(p.row(r), total);
      detail::gemm_nn(rows, dh, total, p.ptr(), total, values.ptr() + h * dh, d,
                      attended[i].ptr() + h * dh, d, false);
      probs[i].push_back(std::move(p));
    }
  }
  for (std::size_t i = 0; i < Y.size(); ++i) {
    require_finite(attended[i], "sca_forward");
    out.push_back(linear_forward(attended[i], P, pfx + "." + stage_name(stages[i]) + ".out"));
  }
  if (cache) {
    cache->inputs = Y;
    cache->queries = std::move(Q);
    cache->keys = std::move(keys);
    cache->values = std::move(values);
    cache->probs = std::move(probs);
    cache->attended = std::move(attended);
    cache->row_offsets = std::move(offsets);
  }
  return out;
}

template <typename T>
StageSet<T> sca_backward(const ScaCache<T>& c, const StageSet<T>& dO,
                         const std::vector<std::size_t>& stages, std::size_t heads,
                         const ParamSet<T>& P, ParamSet<T>& G, const std::string& pfx) {
  const std::size_t d = c.keys.cols(), total = c.keys.rows(), dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  Tensor<T> dkeys({total, d}), dvalues({total, d});
  StageSet<T> dQ;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string sp = pfx + "." + stage_name(stages[i]);
    Tensor<T> dA = linear_backward(c.attended[i], dO[i], P, G, sp + ".out");
    const std::size_t rows = dA.rows();
    Tensor<T> dq({rows, d});
    Tensor<T> dp({rows, total});
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor<T>& p = c.probs[i][h];
      detail::gemm_nt(rows, total, dh, dA.ptr() + h * dh, d, c.values.ptr() + h * dh, d, dp.ptr(),
                      total, false);
      detail::gemm_tn(total, dh, rows, p.ptr(), total, dA.ptr() + h * dh, d, dvalues.ptr() + h * dh,
                      d, true);
      for (std::size_t r = 0; r < rows; ++r) {
        T* row = dp.row(r);
        detail::softmax_row_backward(p.row(r), row, row, total);
        for (std::size_t j = 0; j < total; ++j) row[j] *= scale;
      }
      detail::gemm_nn(rows, dh, total, dp.ptr(), total, c.keys.ptr() + h * dh, d, dq.ptr() + h * dh,
                      d, true);
      detail::gemm_tn(total, dh, rows, dp.ptr(), total, c.queries[i].ptr() + h * dh, d,
                      dkeys.ptr() + h * dh, d, true);
    }
    dQ.push_back(std::move(dq));
  }
  std::vector<std::size_t> sizes;
  for (const auto& y : c.inputs) sizes.push_back(y.rows());
  auto dK = split(dkeys, 0, sizes);
  auto dV = split(dvalues, 0, sizes);
  StageSet<T> dY;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string sp = pfx + "." + stage_name(stages[i]);
    Tensor<T> dy = linear_backward(c.inputs[i], dQ[i], P, G, sp + ".q");
    dy += linear_backward(c.inputs[i], dK[i], P, G, sp + ".k");
    dy += linear_backward(c.inputs[i], dV[i], P, G, sp + ".v");
    dY.push_back(std::move(dy));
  }
  return dY;
}

// ---------------------------------------------------------------------------
// MSCA block

template <typename T>
struct MscaSampleCache {
  ScaCache<T> sca;
  StageSet<T> mixed;  // H_i
  std::vector<FfnCache<T>> ffn;
};

template <typename T>
struct MscaBlockCache {
  CcaCache<T> cca;
  std::vector<MscaSampleCache<T>> samples;
};

template <typename T>
std::vector<StageSet<T>> msca_block_forward(const std::vector<StageSet<T>>& batch,
                                            const ModelConfig& cfg, std::size_t block,
                                            const ParamSet<T>& P, const ParamSet<T>& buffers,
                                            Phase phase, MscaBlockCache<T>* cache) {
  const std::string pfx = msca_prefix(block);
  const auto stages = cfg.active_stages();
  std::vector<StageSet<T>> recal =
      cfg.cca ? cca_forward(batch, P, buffers, pfx + ".cca", phase, cache ? &cache->cca : nullptr)
              : batch;
  if (cache) cache->samples.assign(batch.size(), {});
  std::vector<StageSet<T>> out(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    MscaSampleCache<T> local;
    MscaSampleCache<T>& sc = cache ? cache->samples[b] : local;
    StageSet<T> mixed = recal[b];
    if (cfg.sca) {
      StageSet<T> attn = sca_forward(recal[b], stages, cfg.msca_heads, P, pfx + ".sca", &sc.sca);
      for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] += attn[i];
    }
    sc.ffn.assign(stages.size(), {});
    for (std::size_t i = 0; i < stages.size(); ++i) {
      out[b].push_back(ffn_forward(mixed[i], P, pfx + ".ffn." + stage_name(stages[i]), &sc.ffn[i]));
    }
    sc.mixed = std::move(mixed);
  }
  return out;
}

template <typename T>
std::vector<StageSet<T>> msca_block_backward(const MscaBlockCache<T>& cache,
                                             const std::vector<StageSet<T>>& dout,
                                             const ModelConfig& cfg, std::size_t block,
                                             const ParamSet<T>& P, ParamSet<T>& G) {
  const std::string pfx = msca_prefix(block);
  const auto stages = cfg.active_stages();
  std::vector<StageSet<T>> drecal(dout.size());
  for (std::size_t b = 0; b < dout.size(); ++b) {
    const auto& sc = cache.samples[b];
    StageSet<T> dmixed;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      dmixed.push_back(ffn_backward(sc.ffn[i], dout[b][i], P, G, pfx + ".ffn." + stage_name(stages[i])));
    }
    drecal[b] = dmixed;
    if (cfg.sca) {
      StageSet<T> dy = sca_backward(sc.sca, dmixed, stages, cfg.msca_heads, P, G, pfx + ".sca");
      for (std::size_t i = 0; i < stages.size(); ++i) drecal[b][i] += dy[i];
    }
  }
  if (!cfg.cca) return drecal;
  return cca_backward(cache.cca, drecal, P, G, pfx + ".cca");
}

// ---------------------------------------------------------------------------
// Attention dump
//
// Binary layout (little-endian):
//   "M2AD", u32 version (=1), u32 record_count,
//   records: u32 query_stage, u32 query_row, u32 key_stage, u32 key_row,
//            u32 merged_grid_index, f32 weight
// Stages are 1-based. Weights are averaged over heads, so one query's weights
// sum to 1. The class-token row has merged_grid_index = kClsGridIndex.

inline constexpr std::uint32_t kAttentionDumpVersion = 1;
inline constexpr std::uint32_t kClsGridIndex = 0xFFFFFFFFu;

struct AttentionRecord {
  std::uint32_t query_stage = 0;
  std::uint32_t query_row = 0;
  std::uint32_t key_stage = 0;
  std::uint32_t key_row = 0;
  std::uint32_t merged_grid_index = 0;
  float weight = 0.0f;

  friend bool operator==(const AttentionRecord&, const AttentionRecord&) = default;
};

// `indices[i]` are the selected merged-grid indices of active stage i; rows
// beyond them are class-token rows.
template <typename T>
std::vector<AttentionRecord> extract_attention_maps(const ScaCache<T>& c,
                                                    const std::vector<std::size_t>& stages,
                                                    const std::vector<IndexList>& indices,
                                                    std::size_t query_stage, std::size_t query_row) {
  std::size_t qi = stages.size();
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i] + 1 == query_stage) qi = i;
  }
  if (qi == stages.size() || c.probs.empty()) {
    throw IndexError("attention query: stage " + std::to_string(query_stage) + " is not active");
  }
  const std::size_t rows = c.inputs[qi].rows();
  if (query_row >= rows) {
    throw IndexError("attention query: row " + std::to_string(query_row) + " out of range [0, " +
                     std::to_string(rows) + ")");
  }
  const std::size_t heads = c.probs[qi].size();
  std::vector<AttentionRecord> out;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    for (std::size_t r = 0; r < c.inputs[i].rows(); ++r) {
      const std::size_t col = c.row_offsets[i] + r;
      T w{0};
      for (std::size_t h = 0; h < heads; ++h) w += c.probs[qi][h](query_row, col);
      AttentionRecord rec;
      rec.query_stage = static_cast<std::uint32_t>(query_stage);
      rec.query_row = static_cast<std::uint32_t>(query_row);
      rec.key_stage = static_cast<std::uint32_t>(stages[i] + 1);
      rec.key_row = static_cast<std::uint32_t>(r);
      rec.merged_grid_index =
          r < indices[i].size() ? static_cast<std::uint32_t>(indices[i][r]) : kClsGridIndex;
      rec.weight = static_cast<float>(w / static_cast<T>(heads));
      out.push_back(rec);
    }
  }
  return out;
}

inline void write_attention_dump(std::ostream& os, const std::vector<AttentionRecord>& recs) {
  io::put_magic(os, "M2AD");
  io::put_u32(os, kAttentionDumpVersion);
  io::put_u32(os, static_cast<std::uint32_t>(recs.size()));
  for (const auto& r : recs) {
    io::put_u32(os, r.query_stage);
    io::put_u32(os, r.query_row);
    io::put_u32(os, r.key_stage);
    io::put_u32(os, r.key_row);
    io::put_u32(os, r.merged_grid_index);
    io::put_f32(os, r.weight);
  }
}

inline std::vector<AttentionRecord> read_attention_dump(std::istream& is) {
  io::expect_magic(is, "M2AD", "attention dump");
  if (io::get_u32(is) != kAttentionDumpVersion) throw VersionError("attention dump: unsupported version");
  std::vector<AttentionRecord> out(io::get_u32(is));
  for (auto& r : out) {
    r.query_stage = io::get_u32(is);
    r.query_row = io::get_u32(is);
    r.key_stage = io::get_u32(is);
    r.key_row = io::get_u32(is);
    r.merged_grid_index = io::get_u32(is);
    r.weight = io::get_f32(is);
  }
  return out;
}

inline void write_attention_sidecar(std::ostream& os, const std::vector<AttentionRecord>& recs) {
  os << "# query_stage query_row key_stage key_row merged_grid_index weight\n";
  os << std::setprecision(9);
  for (const auto& r : recs) {
    os << r.query_stage << ' ' << r.query_row << ' ' << r.key_stage << ' ' << r.key_row << ' ';
    if (r.merged_grid_index == kClsGridIndex) os << "cls";
    else os << r.merged_grid_index;
    os << ' ' << r.weight << '\n';
  }
}

}  // namespace m2f
