#pragma once

// Verification oracles: central finite differences, a naive multi-head
// attention reference, and block-level gradient checks.
//
// The reference attention shares nothing with the fast kernels except Tensor.
// Gradient checks run in double precision on a small configuration whose
// parameters are redrawn at unit scale, so that sampled gradients are O(1)
// and the relative-error floor of 1e-8 does not dominate.

#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "m2former/model.hpp"

namespace m2f {

// ---------------------------------------------------------------------------
// Finite differences

// Central differences at every coordinate listed in `coords` (all coordinates
// when empty); the rest of the result stays zero. f must leave x unchanged.
inline Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                       const Tensor<double>& x, double eps,
                                       const std::vector<std::size_t>& coords = {}) {
  Tensor<double> probe = x;
  Tensor<double> g(x.shape());
  auto eval = [&]() {
    const double v = f(probe);
    if (!std::isfinite(v)) throw OracleError("finite_diff_grad: function returned a non-finite value");
    return v;
  };
  auto one = [&](std::size_t j) {
    const double orig = probe[j];
    probe[j] = orig + eps;
    const double up = eval();
    probe[j] = orig - eps;
    const double down = eval();
    probe[j] = orig;
    g[j] = (up - down) / (2.0 * eps);
  };
  if (coords.empty()) {
    for (std::size_t j = 0; j < x.size(); ++j) one(j);
  } else {
    for (std::size_t j : coords) {
      if (j >= x.size()) throw IndexError("finite_diff_grad: coordinate out of range");
      one(j);
    }
  }
  return g;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// ---------------------------------------------------------------------------
// Reference attention

template <typename T>
struct RefAttentionParams {
  Tensor<T> wq, wk, wv;  // [c x d]
  Tensor<T> wo;          // [d x c_out]
  Tensor<T> bq, bk, bv, bo;  // optional, empty = none
  std::size_t heads = 1;
};

namespace detail {

template <typename T>
std::vector<std::vector<double>> naive_affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t m = x.dim(0), c = x.dim(1), n = w.dim(1);
  std::vector<std::vector<double>> y(m, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = b.empty() ? 0.0 : static_cast<double>(b[j]);
      for (std::size_t t = 0; t < c; ++t) acc += static_cast<double>(x(i, t)) * static_cast<double>(w(t, j));
      y[i][j] = acc;
    }
  }
  return y;
}

}  // namespace detail

// softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated, then W_o.
// Accumulates in double regardless of T.
template <typename T>
Tensor<T> reference_attention(const Tensor<T>& x, const RefAttentionParams<T>& p) {
  const std::size_t m = x.dim(0), d = p.wq.dim(1), cout = p.wo.dim(1);
  if (p.heads == 0 || d % p.heads != 0) throw ConfigError("reference_attention: bad head count");
  const std::size_t dh = d / p.heads;
  auto q = detail::naive_affine(x, p.wq, p.bq);
  auto k = detail::naive_affine(x, p.wk, p.bk);
  auto v = detail::naive_affine(x, p.wv, p.bv);
  std::vector<std::vector<double>> ctx(m, std::vector<double>(d, 0.0));
  std::vector<double> w(m);
  for (std::size_t h = 0; h < p.heads; ++h) {
    for (std::size_t i = 0; i < m; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < dh; ++t) s += q[i][h * dh + t] * k[j][h * dh + t];
        w[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, w[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        w[j] = std::exp(w[j] - mx);
        z += w[j];
      }
      for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t t = 0; t < dh; ++t) ctx[i][h * dh + t] += (w[j] / z) * v[j][h * dh + t];
      }
    }
  }
  Tensor<T> out({m, cout});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < cout; ++j) {
      double acc = p.bo.empty() ? 0.0 : static_cast<double>(p.bo[j]);
      for (std::size_t t = 0; t < d; ++t) acc += ctx[i][t] * static_cast<double>(p.wo(t, j));
      out(i, j) = static_cast<T>(acc);
    }
  }
  return out;
}

// Reference parameters equivalent to the fused backbone attention `pfx`.
template <typename T>
RefAttentionParams<T> reference_from_mhsa(const ParamSet<T>& P, const std::string& pfx, std::size_t heads) {
  const Tensor<T>& w = P.at(pfx + ".qkv.weight");
  const Tensor<T>& b = P.at(pfx + ".qkv.bias");
  const std::size_t c = w.dim(0);
  auto cols = split(w, 1, {c, c, c});
  auto bias = split(b.reshape({1, 3 * c}), 1, {c, c, c});
  RefAttentionParams<T> r;
  r.wq = cols[0];
  r.wk = cols[1];
  r.wv = cols[2];
  r.bq = bias[0].reshape({c});
  r.bk = bias[1].reshape({c});
  r.bv = bias[2].reshape({c});
  r.wo = P.at(pfx + ".proj.weight");
  r.bo = P.at(pfx + ".proj.bias");
  r.heads = heads;
  return r;
}

// Reference parameters equivalent to one stage's spatial cross-attention.
template <typename T>
RefAttentionParams<T> reference_from_sca(const ParamSet<T>& P, const std::string& stage_pfx, std::size_t heads) {
  RefAttentionParams<T> r;
  r.wq = P.at(stage_pfx + ".q.weight");
  r.wk = P.at(stage_pfx + ".k.weight");
  r.wv = P.at(stage_pfx + ".v.weight");
  r.wo = P.at(stage_pfx + ".out.weight");
  r.heads = heads;
  return r;
}

// ---------------------------------------------------------------------------
// Block gradient checks

inline const std::vector<std::string>& check_block_names() {
  static const std::vector<std::string> names{"patch_embed", "run_stage",  "select_patches", "transfer_cls",
                                              "cca",         "sca",        "msca_block",     "heads"};
  return names;
}

struct GradThresholds {
  double eps = 1e-5;
  double max_rel = 1e-4;
  std::size_t max_coords = 64;
};

struct GradReport {
  std::string block;
  std::uint64_t seed = 0;
  std::vector<std::string> sampled;  // tensor names touched by the sample
  std::size_t coords = 0;
  double max_rel = 0.0;
  double max_abs = 0.0;
  double threshold = 0.0;
  bool zero_check = true;  // unselected inputs carry exactly zero gradient
  bool passed = false;

  nlohmann::json to_json() const {
    return {{"block", block},     {"seed", seed},         {"coords", coords},
            {"sampled", sampled}, {"max_rel_err", max_rel}, {"max_abs_err", max_abs},
            {"threshold", threshold}, {"zero_check", zero_check}, {"pass", passed}};
  }
};

// Small configuration with every feature on; grid sides 16/8/4/2.
inline ModelConfig check_config() {
  ModelConfig c;
  c.input_size = 64;
  c.stage_channels = {8, 16, 32, 64};
  c.stage_depths = {1, 1, 1, 1};
  c.stage_heads = {1, 2, 2, 4};
  c.k_schedule = {4, 4, 2, 1};
  c.attention_dim = 16;
  c.msca_heads = 2;
  c.num_classes = 4;
  return c;
}

namespace detail {

struct Probe {
  std::string name;
  Tensor<double>* value;
  const Tensor<double>* grad;
};

inline void unit_scale(ParamSet<double>& P, Rng& rng) {
  for (std::size_t i = 0; i < P.size(); ++i) {
    const std::string& n = P.name(i);
    Tensor<double>& t = P.value(i);
    const bool gain = n.size() >= 6 && n.compare(n.size() - 6, 6, ".gamma") == 0;
    const bool shift = (n.size() >= 5 && n.compare(n.size() - 5, 5, ".beta") == 0) ||
                       (n.size() >= 5 && n.compare(n.size() - 5, 5, ".bias") == 0);
    const double scale = t.rank() == 2 ? 1.0 / std::sqrt(static_cast<double>(t.dim(0))) : 0.5;
    for (auto& v : t.data()) {
      if (gain) v = 1.0 + 0.1 * rng.normal();
      else if (shift) v = 0.1 * rng.normal();
      else v = scale * rng.normal();
    }
  }
}

inline Tensor<double> random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline double project(const Tensor<double>& x, const Tensor<double>& r) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * r[i];
  return acc;
}

// Draws up to `quota` distinct (probe, element) pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_coords(const std::vector<Probe>& probes,
                                                                      std::size_t quota, Rng& rng) {
  std::vector<std::pair<std::size_t, std::size_t>> all_or_some;
  std::size_t total = 0;
  for (const auto& p : probes) total += p.value->size();
  auto locate = [&](std::size_t flat) {
    for (std::size_t i = 0; i < probes.size(); ++i) {
      if (flat < probes[i].value->size()) return std::pair<std::size_t, std::size_t>{i, flat};
      flat -= probes[i].value->size();
    }
    throw IndexError("sample_coords: flat index out of range");
  };
  if (total <= quota) {
    for (std::size_t f = 0; f < total; ++f) all_or_some.push_back(locate(f));
    return all_or_some;
  }
  std::set<std::size_t> picked;
  while (picked.size() < quota) picked.insert(static_cast<std::size_t>(rng.below(total)));
  for (std::size_t f : picked) all_or_some.push_back(locate(f));
  return all_or_some;
}

// Compares analytic and central-difference gradients at the sampled
// coordinates. `loss` must recompute from the current probe values.
inline void compare(GradReport& rep, const std::vector<Probe>& probes,
                    const std::vector<std::pair<std::size_t, std::size_t>>& coords,
                    const std::function<double()>& loss, double eps) {
  std::set<std::string> names;
  for (auto [pi, j] : coords) {
    Tensor<double>& x = *probes[pi].value;
    const double orig = x[j];
    x[j] = orig + eps;
    const double up = loss();
    x[j] = orig - eps;
    const double down = loss();
    x[j] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) throw OracleError(rep.block + ": non-finite loss");
    const double fd = (up - down) / (2.0 * eps);
    const double an = (*probes[pi].grad)[j];
    rep.max_abs = std::max(rep.max_abs, std::abs(fd - an));
    rep.max_rel = std::max(rep.max_rel, relative_error(an, fd));
    names.insert(probes[pi].name);
    ++rep.coords;
  }
  rep.sampled.assign(names.begin(), names.end());
}

inline std::vector<Probe> param_probes(ParamSet<double>& P, const ParamSet<double>& G, const std::string& prefix) {
  std::vector<Probe> out;
  for (std::size_t i = 0; i < P.size(); ++i) {
    if (P.name(i).rfind(prefix, 0) == 0) out.push_back({P.name(i), &P.value(i), &G.at(P.name(i))});
  }
  return out;
}

inline std::vector<StageSet<double>> random_token_batch(const ModelConfig& cfg, std::size_t B, Rng& rng) {
  std::vector<StageSet<double>> batch(B);
  for (auto& set : batch) {
    for (std::size_t s : cfg.active_stages()) {
      set.push_back(random_tensor({cfg.k_schedule[s] + 1, cfg.stage_channels[s]}, rng));
    }
  }
  return batch;
}

}  // namespace detail

inline GradReport check_block(const std::string& block, std::uint64_t seed, const GradThresholds& th = {}) {
  using detail::Probe;
  const ModelConfig cfg = check_config();
  Model<double> model(cfg);
  ParamSet<double>& P = model.params();
  ParamSet<double>& buffers = model.buffers();
  Rng rng(seed * 0x9E3779B97F4A7C15ull + 17);
  detail::unit_scale(P, rng);
  ParamSet<double> G = P.zeros_like();

  GradReport rep;
  rep.block = block;
  rep.seed = seed;
  rep.threshold = th.max_rel;

  std::vector<Probe> inputs, params;
  std::function<double()> loss;
  std::vector<Tensor<double>> input_store, grad_store;
  input_store.reserve(16);
  grad_store.reserve(16);
  auto add_input = [&](const std::string& name, Tensor<double> x, Tensor<double> g) -> Tensor<double>& {
    input_store.push_back(std::move(x));
    grad_store.push_back(std::move(g));
    inputs.push_back({name, &input_store.back(), &grad_store.back()});
    return input_store.back();
  };
  std::vector<std::pair<std::size_t, std::size_t>> extra_zero_coords;
  const std::size_t half = th.max_coords / 2;

  if (block == "patch_embed") {
    Tensor<double> img = detail::random_tensor({cfg.input_size, cfg.input_size, cfg.in_channels}, rng);
    PatchEmbedCache<double> cache;
    Tensor<double> out = patch_embed(img, P, &cache);
    Tensor<double> R = detail::random_tensor(out.shape(), rng);
    Tensor<double> dimg = patch_embed_backward(cache, R, img.shape(), P, G);
    Tensor<double>* x = &add_input("image", img, dimg);
    loss = [&, x, R] { return detail::project(patch_embed<double>(*x, P, nullptr), R); };
    params = detail::param_probes(P, G, "patch_embed");
  } else if (block == "run_stage") {
    const std::size_t s = 1, side = cfg.grid_side(s), c = cfg.stage_channels[s], cn = cfg.stage_channels[s + 1];
    StageOutput<double> in{detail::random_tensor({side, side, c}, rng), detail::random_tensor({c}, rng)};
    StageCache<double> cache;
    auto res = run_stage(in, P, cfg, s, &cache);
    StageOutput<double> rout{detail::random_tensor(res.output.features.shape(), rng), detail::random_tensor({c}, rng)};
    StageOutput<double> rnext{detail::random_tensor(res.next.features.shape(), rng), detail::random_tensor({cn}, rng)};
    StageOutput<double> din = run_stage_backward(cache, rout, rnext, P, G, cfg, s);
    Tensor<double>* xf = &add_input("input.features", in.features, din.features);
    Tensor<double>* xc = &add_input("input.cls", in.cls, din.cls);
    loss = [&, xf, xc, s, rout, rnext] {
      auto r = run_stage<double>({*xf, *xc}, P, cfg, s, nullptr);
      return detail::project(r.output.features, rout.features) + detail::project(r.output.cls, rout.cls) +
             detail::project(r.next.features, rnext.features) + detail::project(r.next.cls, rnext.cls);
    };
    params = detail::param_probes(P, G, stage_name(s) + ".");
  } else if (block == "select_patches") {
    const std::size_t s = 0, side = cfg.grid_side(s), c = cfg.stage_channels[s], k = cfg.k_schedule[s];
    Tensor<double> grid = detail::random_tensor({side, side, c}, rng);
    auto sel = msps(grid, cfg.merge_factor, k, s);
    Tensor<double> R = detail::random_tensor(sel.patches.shape(), rng);
    Tensor<double> dgrid = msps_backward(sel, R, grid.shape());
    // grid cells outside every selected merged patch
    const std::size_t r = cfg.merge_factor, mw = side / r;
    std::set<std::size_t> chosen(sel.indices.begin(), sel.indices.end());
    std::vector<std::size_t> unselected, selected;
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t xx = 0; xx < side; ++xx) {
        const bool in = chosen.count((y / r) * mw + xx / r) > 0;
        for (std::size_t ch = 0; ch < c; ++ch) (in ? selected : unselected).push_back((y * side + xx) * c + ch);
      }
    }
    for (std::size_t j : unselected) {
      if (dgrid[j] != 0.0) rep.zero_check = false;
    }
    Tensor<double>* x = &add_input("grid", grid, dgrid);
    loss = [&, x, R, k, s] { return detail::project(msps(*x, cfg.merge_factor, k, s).patches, R); };
    // half the sample inside selected patches, half outside
    for (std::size_t i = 0; i < half && i < selected.size(); ++i) {
      extra_zero_coords.push_back({0, selected[rng.below(selected.size())]});
    }
    for (std::size_t i = 0; i < half && i < unselected.size(); ++i) {
      extra_zero_coords.push_back({0, unselected[rng.below(unselected.size())]});
    }
  } else if (block == "transfer_cls") {
    const std::size_t B = 4, s = 0;
    Tensor<double> cls_g = detail::random_tensor({B, cfg.stage_channels[kNumStages - 1]}, rng);
    TransferCache<double> cache;
    Tensor<double> out = transfer_cls(cls_g, s, cfg.ctt_mode, P, buffers, Phase::Train, &cache);
    Tensor<double> R = detail::random_tensor(out.shape(), rng);
    Tensor<double> dx = transfer_cls_backward(cache, R, s, P, G);
    Tensor<double>* x = &add_input("cls_g", cls_g, dx);
    loss = [&, x, R, s] {
      return detail::project(transfer_cls<double>(*x, s, cfg.ctt_mode, P, buffers, Phase::Train, nullptr), R);
    };
    params = detail::param_probes(P, G, transfer_prefix(s) + ".");
  } else if (block == "cca" || block == "msca_block") {
    const std::size_t B = 3;
    auto batch = detail::random_token_batch(cfg, B, rng);
    std::vector<StageSet<double>> out, din;
    CcaCache<double> cc;
    MscaBlockCache<double> mc;
    const std::string pfx = msca_prefix(0) + (block == "cca" ? ".cca" : "");
    if (block == "cca") out = cca_forward(batch, P, buffers, pfx, Phase::Train, &cc);
    else out = msca_block_forward(batch, cfg, 0, P, buffers, Phase::Train, &mc);
    std::vector<StageSet<double>> R(B);
    for (std::size_t b = 0; b < B; ++b) {
      for (const auto& t : out[b]) R[b].push_back(detail::random_tensor(t.shape(), rng));
    }
    if (block == "cca") din = cca_backward(cc, R, P, G, pfx);
    else din = msca_block_backward(mc, R, cfg, 0, P, G);
    std::vector<std::vector<Tensor<double>*>> xs(B);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < batch[b].size(); ++i) {
        xs[b].push_back(&add_input("tokens[" + std::to_string(b) + "]." + stage_name(cfg.active_stages()[i]),
                                   batch[b][i], din[b][i]));
      }
    }
    const bool is_cca = block == "cca";
    loss = [&, R, xs, B, is_cca, pfx] {
      std::vector<StageSet<double>> cur(B);
      for (std::size_t b = 0; b < B; ++b) {
        for (auto* t : xs[b]) cur[b].push_back(*t);
      }
      auto o = is_cca ? cca_forward<double>(cur, P, buffers, pfx, Phase::Train, nullptr)
                      : msca_block_forward<double>(cur, cfg, 0, P, buffers, Phase::Train, nullptr);
      double acc = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < o[b].size(); ++i) acc += detail::project(o[b][i], R[b][i]);
      }
      return acc;
    };
    params = detail::param_probes(P, G, pfx + ".");
  } else if (block == "sca") {
    const auto stages = cfg.active_stages();
    StageSet<double> Y = detail::random_token_batch(cfg, 1, rng)[0];
    const std::string pfx = msca_prefix(0) + ".sca";
    ScaCache<double> cache;
    StageSet<double> out = sca_forward(Y, stages, cfg.msca_heads, P, pfx, &cache);
    StageSet<double> R;
    for (const auto& t : out) R.push_back(detail::random_tensor(t.shape(), rng));
    StageSet<double> dY = sca_backward(cache, R, stages, cfg.msca_heads, P, G, pfx);
    std::vector<Tensor<double>*> xs;
    for (std::size_t i = 0; i < Y.size(); ++i) xs.push_back(&add_input("Y." + stage_name(stages[i]), Y[i], dY[i]));
    loss = [&, R, xs, stages, pfx] {
      StageSet<double> cur;
      for (auto* t : xs) cur.push_back(*t);
      auto o = sca_forward<double>(cur, stages, cfg.msca_heads, P, pfx, nullptr);
      double acc = 0.0;
      for (std::size_t i = 0; i < o.size(); ++i) acc += detail::project(o[i], R[i]);
      return acc;
    };
    params = detail::param_probes(P, G, pfx + ".");
  } else if (block == "heads") {
    std::vector<Tensor<double>> feats;
    for (std::size_t s : cfg.active_stages()) feats.push_back(detail::random_tensor({1, cfg.stage_channels[s]}, rng));
    const std::size_t target = rng.below(cfg.num_classes);
    const auto alphas = head_alphas(cfg);
    auto pred = stage_predictions(feats, cfg, P);
    auto dlogits = total_loss_backward(pred, target, alphas);
    auto dfeat = stage_predictions_backward(feats, dlogits, cfg, P, G);
    std::vector<Tensor<double>*> xs;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      xs.push_back(&add_input("feature." + stage_name(cfg.active_stages()[i]), feats[i], dfeat[i]));
    }
    loss = [&, xs, target, alphas] {
      std::vector<Tensor<double>> cur;
      for (auto* t : xs) cur.push_back(*t);
      return total_loss(stage_predictions(cur, cfg, P), target, alphas);
    };
    params = detail::param_probes(P, G, "head.");
  } else {
    throw ConfigError("check_block: unknown block '" + block + "'");
  }

  if (!extra_zero_coords.empty()) {
    detail::compare(rep, inputs, extra_zero_coords, loss, th.eps);
    for (auto [pi, j] : extra_zero_coords) {
      // exactness: an unselected coordinate must give a bit-exact zero difference
      if ((*inputs[pi].grad)[j] == 0.0) {
        Tensor<double>& x = *inputs[pi].value;
        const double orig = x[j];
        x[j] = orig + th.eps;
        const double up = loss();
        x[j] = orig - th.eps;
        const double down = loss();
        x[j] = orig;
        if (up != down) rep.zero_check = false;
      }
    }
  } else {
    const std::size_t in_quota = params.empty() ? th.max_coords : half;
    auto ci = detail::sample_coords(inputs, in_quota, rng);
    auto cp = detail::sample_coords(params, th.max_coords - std::min(ci.size(), th.max_coords), rng);
    std::vector<Probe> all = inputs;
    all.insert(all.end(), params.begin(), params.end());
    for (auto& c : cp) c.first += inputs.size();
    ci.insert(ci.end(), cp.begin(), cp.end());
    detail::compare(rep, all, ci, loss, th.eps);
  }
  rep.passed = rep.max_rel < th.max_rel && rep.zero_check;
  return rep;
}

}  // namespace m2f
