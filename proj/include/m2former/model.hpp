#pragma once

// Full model: backbone -> per-stage selection -> class-token pathway ->
// MSCA blocks -> heads. Forward and backward run over a batch; the backbone and
// selection work per sample (optionally on worker threads), everything after
// the class-token pathway is batched because of batch normalization.

#include <algorithm>
#include <array>
#include <functional>
#include <map>
#include <thread>
#include <vector>

#include "m2former/backbone.hpp"
#include "m2former/config.hpp"
#include "m2former/crossattn.hpp"
#include "m2former/heads.hpp"
#include "m2former/selection.hpp"
#include "m2former/transfer.hpp"

namespace m2f {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is handled
// by exactly one worker; callers keep results per index and reduce in order.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct ForwardOptions {
  bool cache_backbone = false;
  bool cache_head = false;
};

template <typename T>
struct SampleState {
  BackboneCache<T> backbone;
  std::array<StageOutput<T>, kNumStages> stages;
  std::vector<SelectedSet<T>> selections;  // one per active stage
};

template <typename T>
struct BatchState {
  Phase phase = Phase::Eval;
  std::vector<SampleState<T>> samples;
  std::vector<TransferCache<T>> transfer;   // indexed like active stages
  std::vector<bool> transferred;            // whether transfer[i] was used
  std::vector<StageSet<T>> tokens;          // P~ per sample
  std::vector<MscaBlockCache<T>> blocks;
  std::vector<StageSet<T>> head_tokens;     // MSCA output per sample
  std::vector<std::vector<Tensor<T>>> features;
  std::vector<PredictionSet<T>> predictions;
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    add_backbone_params(params_, cfg_, rng);
    if (!cfg_.bare_backbone()) {
      add_transfer_params(params_, buffers_, cfg_, rng);
      add_msca_params(params_, buffers_, cfg_, rng);
    }
    add_head_params(params_, cfg_, rng);
    threads_ = std::max(1u, std::thread::hardware_concurrency());
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  ParamSet<T>& buffers() { return buffers_; }
  const ParamSet<T>& buffers() const { return buffers_; }
  void set_threads(std::size_t n) { threads_ = std::max<std::size_t>(1, n); }

  BatchState<T> forward(const std::vector<const Tensor<T>*>& images, Phase phase,
                        ForwardOptions opt = {}) const {
    const std::size_t B = images.size();
    if (B == 0) throw DimensionError("forward: empty batch");
    const auto stages = cfg_.active_stages();
    BatchState<T> st;
    st.phase = phase;
    st.samples.resize(B);
    parallel_for(B, threads_, [&](std::size_t b) {
      auto& s = st.samples[b];
      s.stages = forward_backbone(*images[b], params_, cfg_, opt.cache_backbone ? &s.backbone : nullptr);
      for (std::size_t si : stages) {
        s.selections.push_back(msps(s.stages[si].features, cfg_.merge_factor, cfg_.k_schedule[si], si));
      }
    });

    st.features.resize(B);
    if (cfg_.bare_backbone()) {
      for (std::size_t b = 0; b < B; ++b) {
        const Tensor<T>& g = st.samples[b].stages[kNumStages - 1].cls;
        st.features[b] = {g.reshape({1, g.size()})};
        st.predictions.push_back(stage_predictions(st.features[b], cfg_, params_));
      }
      return st;
    }

    // class-token pathway
    const std::size_t c4 = cfg_.stage_channels[kNumStages - 1];
    std::vector<Tensor<T>> cls_rows(stages.size());
    st.transfer.resize(stages.size());
    st.transferred.assign(stages.size(), false);
    const bool ctt = cfg_.ctt_mode == AttachMode::Ctt1Mlp || cfg_.ctt_mode == AttachMode::Ctt2Mlp;
    Tensor<T> cls_g({B, c4});
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor<T>& g = st.samples[b].stages[kNumStages - 1].cls;
      std::copy(g.ptr(), g.ptr() + c4, cls_g.row(b));
    }
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (ctt && stages[i] + 1 < kNumStages) {
        cls_rows[i] = transfer_cls(cls_g, stages[i], cfg_.ctt_mode, params_, buffers_, phase,
                                   &st.transfer[i]);
        st.transferred[i] = true;
      }
    }
    st.tokens.resize(B);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < stages.size(); ++i) {
        const Tensor<T>& patches = st.samples[b].selections[i].patches;
        const std::size_t c = cfg_.stage_channels[stages[i]];
        switch (cfg_.ctt_mode) {
          case AttachMode::GlobalPool: st.tokens[b].push_back(patches); break;
          case AttachMode::SimpleAttach:
            st.tokens[b].push_back(attach_cls(patches, st.samples[b].stages[stages[i]].cls));
            break;
          default:
            if (st.transferred[i]) {
              Tensor<T> row({c});
              std::copy(cls_rows[i].row(b), cls_rows[i].row(b) + c, row.ptr());
              st.tokens[b].push_back(attach_cls(patches, row));
            } else {
              st.tokens[b].push_back(attach_cls(patches, st.samples[b].stages[stages[i]].cls));
            }
        }
      }
    }

    std::vector<StageSet<T>> x = st.tokens;
    st.blocks.resize(cfg_.num_msca_blocks);
    for (std::size_t blk = 0; blk < cfg_.num_msca_blocks; ++blk) {
      x = msca_block_forward(x, cfg_, blk, params_, buffers_, phase,
                             opt.cache_head ? &st.blocks[blk] : nullptr);
    }
    for (std::size_t b = 0; b < B; ++b) {
      for (const auto& o : x[b]) {
        if (cfg_.has_cls_rows()) {
          Tensor<T> f({1, o.cols()});
          std::copy(o.row(o.rows() - 1), o.row(o.rows() - 1) + o.cols(), f.ptr());
          st.features[b].push_back(std::move(f));
        } else {
          st.features[b].push_back(mean_axis(o, 0).reshape({1, o.cols()}));
        }
      }
      st.predictions.push_back(stage_predictions(st.features[b], cfg_, params_));
    }
    st.head_tokens = std::move(x);
    return st;
  }

  // Mean over the batch of the summed per-head losses.
  T loss(const BatchState<T>& st, const std::vector<std::size_t>& labels) const {
    const auto alphas = loss_alphas();
    T sum{0};
    for (std::size_t b = 0; b < st.predictions.size(); ++b) sum += total_loss(st.predictions[b], labels[b], alphas);
    return sum / static_cast<T>(st.predictions.size());
  }

  std::vector<double> loss_alphas() const {
    return cfg_.bare_backbone() ? std::vector<double>{cfg_.alpha_schedule[kNumStages]} : head_alphas(cfg_);
  }

  // Gradient of loss() into G (accumulated). Needs a forward with both caches.
  void backward(const BatchState<T>& st, const std::vector<std::size_t>& labels, ParamSet<T>& G) const {
    const std::size_t B = st.predictions.size();
    const auto stages = cfg_.active_stages();
    const auto alphas = loss_alphas();
    const T inv_b = T{1} / static_cast<T>(B);

    std::vector<std::vector<Tensor<T>>> dfeat(B);
    for (std::size_t b = 0; b < B; ++b) {
      auto dlogits = total_loss_backward(st.predictions[b], labels[b], alphas, inv_b);
      dfeat[b] = stage_predictions_backward(st.features[b], dlogits, cfg_, params_, G);
    }

    std::vector<std::array<StageOutput<T>, kNumStages>> dstage(B);
    if (cfg_.bare_backbone()) {
      for (std::size_t b = 0; b < B; ++b) {
        dstage[b][kNumStages - 1].cls = dfeat[b][0].reshape({cfg_.stage_channels[kNumStages - 1]});
      }
      backbone_backward_all(st, dstage, G);
      return;
    }

    std::vector<StageSet<T>> dx(B);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < stages.size(); ++i) {
        const Tensor<T>& o = st.head_tokens[b][i];
        Tensor<T> d(o.shape());
        if (cfg_.has_cls_rows()) {
          std::copy(dfeat[b][i].ptr(), dfeat[b][i].ptr() + o.cols(), d.row(o.rows() - 1));
        } else {
          const T inv = T{1} / static_cast<T>(o.rows());
          for (std::size_t r = 0; r < o.rows(); ++r) {
            for (std::size_t q = 0; q < o.cols(); ++q) d(r, q) = dfeat[b][i][q] * inv;
          }
        }
        dx[b].push_back(std::move(d));
      }
    }
    for (std::size_t blk = cfg_.num_msca_blocks; blk-- > 0;) {
      dx = msca_block_backward(st.blocks[blk], dx, cfg_, blk, params_, G);
    }

    const std::size_t c4 = cfg_.stage_channels[kNumStages - 1];
    Tensor<T> dcls_g({B, c4});
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::size_t s = stages[i], c = cfg_.stage_channels[s];
      Tensor<T> dcls_rows({B, c});
      for (std::size_t b = 0; b < B; ++b) {
        Tensor<T> dpatches = dx[b][i];
        if (cfg_.has_cls_rows()) {
          auto [dp, dc] = detach_cls(dx[b][i]);
          dpatches = std::move(dp);
          std::copy(dc.ptr(), dc.ptr() + c, dcls_rows.row(b));
        }
        const auto& sel = st.samples[b].selections[i];
        dstage[b][s].features = msps_backward(sel, dpatches, st.samples[b].stages[s].features.shape());
      }
      if (!cfg_.has_cls_rows()) continue;
      if (st.transferred[i]) {
        dcls_g += transfer_cls_backward(st.transfer[i], dcls_rows, s, params_, G);
      } else {
        // simple_attach, or stage 4 which carries the global token itself
        for (std::size_t b = 0; b < B; ++b) {
          Tensor<T> d({c});
          std::copy(dcls_rows.row(b), dcls_rows.row(b) + c, d.ptr());
          if (dstage[b][s].cls.empty()) dstage[b][s].cls = std::move(d);
          else dstage[b][s].cls += d;
        }
      }
    }
    for (std::size_t b = 0; b < B; ++b) {
      Tensor<T> d({c4});
      std::copy(dcls_g.row(b), dcls_g.row(b) + c4, d.ptr());
      auto& slot = dstage[b][kNumStages - 1].cls;
      if (slot.empty()) slot = std::move(d);
      else slot += d;
    }
    backbone_backward_all(st, dstage, G);
  }

  // Folds the batch statistics of a training forward into the running
  // statistics (momentum 0.1).
  void commit_running_stats(const BatchState<T>& st) {
    const std::size_t B = st.samples.size();
    for_each_batchnorm(st, [&](const std::string& pfx, const BatchNormCache<T>& c) {
      batchnorm_update_running(buffers_.at(pfx + ".running_mean"), buffers_.at(pfx + ".running_var"), c, B);
    });
  }

  // Replaces the running statistics by population estimates: the average batch
  // mean and unbiased batch variance over consecutive training-mode batches of
  // `batch` images. Momentum averages lag behind a drifting low-variance input
  // by far more than its spread, which wrecks eval-mode outputs.
  void recalibrate_batchnorm(const std::vector<Tensor<T>>& images, std::size_t batch) {
    if (cfg_.bare_backbone()) return;
    if (batch < 2 || images.size() < batch) throw ConfigError("recalibrate_batchnorm: need at least one batch of >= 2");
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> acc;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 + batch <= images.size(); b0 += batch) {
      std::vector<const Tensor<T>*> ptrs;
      for (std::size_t i = 0; i < batch; ++i) ptrs.push_back(&images[b0 + i]);
      const auto st = forward(ptrs, Phase::Train, {false, true});
      const double unbias = static_cast<double>(batch) / static_cast<double>(batch - 1);
      for_each_batchnorm(st, [&](const std::string& pfx, const BatchNormCache<T>& c) {
        auto& [m, v] = acc[pfx];
        m.resize(c.mean.size(), 0.0);
        v.resize(c.var.size(), 0.0);
        for (std::size_t f = 0; f < m.size(); ++f) {
          m[f] += static_cast<double>(c.mean[f]);
          v[f] += static_cast<double>(c.var[f]) * unbias;
        }
      });
      ++batches;
    }
    for (const auto& [pfx, mv] : acc) {
      Tensor<T>& rm = buffers_.at(pfx + ".running_mean");
      Tensor<T>& rv = buffers_.at(pfx + ".running_var");
      for (std::size_t f = 0; f < rm.size(); ++f) {
        rm[f] = static_cast<T>(mv.first[f] / static_cast<double>(batches));
        rv[f] = static_cast<T>(mv.second[f] / static_cast<double>(batches));
      }
    }
  }

 private:
  template <typename F>
  void for_each_batchnorm(const BatchState<T>& st, F&& fn) const {
    if (st.phase != Phase::Train || cfg_.bare_backbone()) return;
    const auto stages = cfg_.active_stages();
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (st.transferred[i] && cfg_.ctt_mode == AttachMode::Ctt2Mlp) {
        fn(transfer_prefix(stages[i]) + ".bn", st.transfer[i].bn);
      }
    }
    if (cfg_.cca) {
      for (std::size_t blk = 0; blk < st.blocks.size(); ++blk) fn(msca_prefix(blk) + ".cca.bn", st.blocks[blk].cca.bn);
    }
  }

  void backbone_backward_all(const BatchState<T>& st,
                             const std::vector<std::array<StageOutput<T>, kNumStages>>& dstage,
                             ParamSet<T>& G) const {
    const std::size_t B = st.samples.size();
    const Shape image_shape{cfg_.input_size, cfg_.input_size, cfg_.in_channels};
    std::vector<ParamSet<T>> per_sample(B);
    parallel_for(B, threads_, [&](std::size_t b) {
      per_sample[b] = backbone_grad_template();
      backward_backbone(st.samples[b].backbone, dstage[b], image_shape, params_, per_sample[b], cfg_);
    });
    for (std::size_t b = 0; b < B; ++b) G.accumulate(per_sample[b]);
  }

  ParamSet<T> backbone_grad_template() const {
    ParamSet<T> g;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& n = params_.name(i);
      if (n.rfind("patch_embed", 0) == 0 || n == "cls_token" || n.rfind("stage", 0) == 0) {
        g.add(n, params_.value(i).shape());
      }
    }
    return g;
  }

  ModelConfig cfg_;
  ParamSet<T> params_;
  ParamSet<T> buffers_;
  std::size_t threads_ = 1;
};

}  // namespace m2f
