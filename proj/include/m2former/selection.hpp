#pragma once

// Multi-scale patch selection: r x r neighbor merging, mean-activation
// scoring and top-k gathering, plus the on-disk selection dump.

#include <cstdint>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "m2former/io.hpp"
#include "m2former/ops.hpp"

namespace m2f {

template <typename T>
struct SelectedSet {
  std::size_t stage = 0;  // 0-based
  std::size_t merge_factor = 2;
  Tensor<T> merged;   // [l_hat x c]
  Tensor<T> scores;   // [l_hat]
  IndexList indices;  // k entries, descending score
  Tensor<T> patches;  // [k x c]
};

// X[h x w x c] (class token already detached) -> [(h*w/r^2) x c].
template <typename T>
Tensor<T> merge_neighbors(const Tensor<T>& grid, std::size_t r) {
  detail::require_rank(grid.shape(), 3, "merge_neighbors");
  const std::size_t h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
  return block_mean_pool(grid.reshape({h * w, c}), h, w, r);
}

template <typename T>
Tensor<T> merge_neighbors_backward(const Tensor<T>& dmerged, const Shape& grid_shape,
                                   std::size_t r) {
  return block_mean_pool_backward(dmerged, grid_shape[0], grid_shape[1], r).reshape(grid_shape);
}

// Mean activation over channels for every merged patch.
template <typename T>
Tensor<T> score_map(const Tensor<T>& merged) {
  return mean_axis(merged, 1);
}

template <typename T>
SelectedSet<T> select_patches(const Tensor<T>& merged, const Tensor<T>& scores, std::size_t k,
                              std::size_t stage, std::size_t merge_factor = 2) {
  const std::size_t l_hat = merged.rows();
  if (scores.size() != l_hat) throw DimensionError("select_patches: score map length mismatch");
  if (k == 0 || k > l_hat) {
    throw SelectionError("stage " + std::to_string(stage + 1) + ": cannot select k=" +
                         std::to_string(k) + " from l_hat=" + std::to_string(l_hat) +
                         " merged patches");
  }
  SelectedSet<T> out;
  out.stage = stage;
  out.merge_factor = merge_factor;
  out.indices = topk_indices(scores, k);
  out.patches = gather_rows(merged, out.indices);
  out.merged = merged;
  out.scores = scores;
  return out;
}

// Merge, score and select in one call on a stage feature map.
template <typename T>
SelectedSet<T> msps(const Tensor<T>& grid, std::size_t r, std::size_t k, std::size_t stage) {
  Tensor<T> merged = merge_neighbors(grid, r);
  Tensor<T> scores = score_map(merged);
  return select_patches(merged, scores, k, stage, r);
}

// Straight-through: indices are constants, so the feature-map gradient is the
// scatter of dP into the selected merged rows, spread over their r^2 tokens.
template <typename T>
Tensor<T> msps_backward(const SelectedSet<T>& sel, const Tensor<T>& dpatches,
                        const Shape& grid_shape) {
  Tensor<T> dmerged = gather_rows_backward(sel.merged.rows(), sel.indices, dpatches);
  return merge_neighbors_backward(dmerged, grid_shape, sel.merge_factor);
}

// ---------------------------------------------------------------------------
// Selection dump
//
// Binary layout (little-endian):
//   "M2SD", u32 version (=1), u32 stage_count
//   per stage: u32 stage (1-based), u32 r, u32 l_hat, u32 k,
//              k x u32 indices, l_hat x f32 scores

struct SelectionRecord {
  std::uint32_t stage = 0;
  std::uint32_t merge_factor = 0;
  std::uint32_t l_hat = 0;
  std::vector<std::uint32_t> indices;
  std::vector<float> scores;

  friend bool operator==(const SelectionRecord&, const SelectionRecord&) = default;
};

inline constexpr std::uint32_t kSelectionDumpVersion = 1;

template <typename T>
SelectionRecord to_record(const SelectedSet<T>& sel) {
  SelectionRecord r;
  r.stage = static_cast<std::uint32_t>(sel.stage + 1);
  r.merge_factor = static_cast<std::uint32_t>(sel.merge_factor);
  r.l_hat = static_cast<std::uint32_t>(sel.merged.rows());
  for (std::size_t i : sel.indices) r.indices.push_back(static_cast<std::uint32_t>(i));
  for (T s : sel.scores.data()) r.scores.push_back(static_cast<float>(s));
  return r;
}

inline void write_selection_dump(std::ostream& os, const std::vector<SelectionRecord>& recs) {
  io::put_magic(os, "M2SD");
  io::put_u32(os, kSelectionDumpVersion);
  io::put_u32(os, static_cast<std::uint32_t>(recs.size()));
  for (const auto& r : recs) {
    io::put_u32(os, r.stage);
    io::put_u32(os, r.merge_factor);
    io::put_u32(os, r.l_hat);
    io::put_u32(os, static_cast<std::uint32_t>(r.indices.size()));
    for (auto i : r.indices) io::put_u32(os, i);
    for (float s : r.scores) io::put_f32(os, s);
  }
}

inline std::vector<SelectionRecord> read_selection_dump(std::istream& is) {
  io::expect_magic(is, "M2SD", "selection dump");
  if (io::get_u32(is) != kSelectionDumpVersion) throw VersionError("selection dump: unsupported version");
  const std::uint32_t n = io::get_u32(is);
  std::vector<SelectionRecord> out(n);
  for (auto& r : out) {
    r.stage = io::get_u32(is);
    r.merge_factor = io::get_u32(is);
    r.l_hat = io::get_u32(is);
    const std::uint32_t k = io::get_u32(is);
    if (k > r.l_hat) throw IoError("selection dump: k exceeds l_hat");
    r.indices.resize(k);
    for (auto& i : r.indices) i = io::get_u32(is);
    r.scores.resize(r.l_hat);
    for (auto& s : r.scores) s = io::get_f32(is);
  }
  return out;
}

inline void write_selection_sidecar(std::ostream& os, const std::vector<SelectionRecord>& recs) {
  os << "# stage r l_hat k | selected merged-grid indices (score)\n";
  os << std::setprecision(9);
  for (const auto& r : recs) {
    os << "stage " << r.stage << " r " << r.merge_factor << " l_hat " << r.l_hat << " k "
       << r.indices.size() << " |";
    for (auto i : r.indices) os << ' ' << i << " (" << r.scores[i] << ')';
    os << '\n';
  }
}

}  // namespace m2f
