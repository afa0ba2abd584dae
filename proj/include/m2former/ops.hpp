#pragma once

// Numeric primitives shared by every block. Each forward has a matching
// analytic backward (vector-Jacobian product). Reductions always run in
// ascending index order so reruns are bit-identical.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "m2former/errors.hpp"
#include "m2former/tensor.hpp"

namespace m2f {

namespace detail {

// C[m x n] (+)= A[m x k] * B[k x n]; row-major with leading dimensions.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* A, std::size_t lda, const T* B,
             std::size_t ldb, T* C, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* c = C + i * ldc;
    if (!accumulate) std::fill(c, c + n, T{0});
    const T* a = A + i * lda;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = a[t];
      if (av == T{0}) continue;
      const T* b = B + t * ldb;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x n] (+)= A^T * B with A stored [k x m] and B stored [k x n].
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* A, std::size_t lda, const T* B,
             std::size_t ldb, T* C, std::size_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m; ++i) std::fill(C + i * ldc, C + i * ldc + n, T{0});
  }
  for (std::size_t t = 0; t < k; ++t) {
    const T* a = A + t * lda;
    const T* b = B + t * ldb;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[i];
      if (av == T{0}) continue;
      T* c = C + i * ldc;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x n] (+)= A * B^T with B stored [n x k]. B is transposed into a scratch
// buffer first so the inner loop stays contiguous; the summation order over k
// is unchanged.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* A, std::size_t lda, const T* B,
             std::size_t ldb, T* C, std::size_t ldc, bool accumulate) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t t = 0; t < k; ++t) bt[t * n + j] = B[j * ldb + t];
  }
  gemm_nn(m, n, k, A, lda, bt.data(), n, C, ldc, accumulate);
}

// In-place numerically stable softmax over a contiguous row.
template <typename T>
void softmax_row(T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T sum{0};
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const T inv = T{1} / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

// dX = Y * (dY - <dY, Y>) for one row; writes into dx (may alias dy).
template <typename T>
void softmax_row_backward(const T* y, const T* dy, T* dx, std::size_t n) {
  T dot{0};
  for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < n; ++j) dx[j] = y[j] * (dy[j] - dot);
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products

template <typename T>
Tensor<T> matmul(const Tensor<T>& A, const Tensor<T>& B) {
  detail::require_rank(A.shape(), 2, "matmul");
  detail::require_rank(B.shape(), 2, "matmul");
  if (A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: inner extents differ, A " + shape_str(A.shape()) + " B " +
                         shape_str(B.shape()));
  }
  Tensor<T> C({A.dim(0), B.dim(1)});
  detail::gemm_nn(A.dim(0), B.dim(1), A.dim(1), A.ptr(), A.dim(1), B.ptr(), B.dim(1), C.ptr(),
                  B.dim(1), false);
  require_finite(C, "matmul");
  return C;
}

// A * B^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& A, const Tensor<T>& B) {
  detail::require_rank(A.shape(), 2, "matmul_nt");
  detail::require_rank(B.shape(), 2, "matmul_nt");
  if (A.dim(1) != B.dim(1)) {
    throw DimensionError("matmul_nt: inner extents differ, A " + shape_str(A.shape()) + " B " +
                         shape_str(B.shape()));
  }
  Tensor<T> C({A.dim(0), B.dim(0)});
  detail::gemm_nt(A.dim(0), B.dim(0), A.dim(1), A.ptr(), A.dim(1), B.ptr(), B.dim(1), C.ptr(),
                  B.dim(0), false);
  require_finite(C, "matmul_nt");
  return C;
}

// A^T * B
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& A, const Tensor<T>& B) {
  detail::require_rank(A.shape(), 2, "matmul_tn");
  detail::require_rank(B.shape(), 2, "matmul_tn");
  if (A.dim(0) != B.dim(0)) {
    throw DimensionError("matmul_tn: inner extents differ, A " + shape_str(A.shape()) + " B " +
                         shape_str(B.shape()));
  }
  Tensor<T> C({A.dim(1), B.dim(1)});
  detail::gemm_tn(A.dim(1), B.dim(1), A.dim(0), A.ptr(), A.dim(1), B.ptr(), B.dim(1), C.ptr(),
                  B.dim(1), false);
  require_finite(C, "matmul_tn");
  return C;
}

template <typename T>
struct MatmulGrads {
  Tensor<T> dA;
  Tensor<T> dB;
};

template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& A, const Tensor<T>& B, const Tensor<T>& dC) {
  return {matmul_nt(dC, B), matmul_tn(A, dC)};
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& A) {
  detail::require_rank(A.shape(), 2, "transpose");
  Tensor<T> out({A.dim(1), A.dim(0)});
  for (std::size_t i = 0; i < A.dim(0); ++i) {
    for (std::size_t j = 0; j < A.dim(1); ++j) out(j, i) = A(i, j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Element-wise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "add");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  require_finite(out, "add");
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "mul");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  require_finite(out, "mul");
  return out;
}

template <typename T>
struct BinaryGrads {
  Tensor<T> da;
  Tensor<T> db;
};

template <typename T>
BinaryGrads<T> mul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dy) {
  return {mul(dy, b), mul(dy, a)};
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  for (auto& v : out.data()) v *= s;
  require_finite(out, "scale");
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  x.require_same_shape(dy, "relu_backward");
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (!(x[i] > T{0})) dx[i] = T{0};
  }
  return dx;
}

template <typename T>
T sigmoid_scalar(T v) {
  return v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = sigmoid_scalar(v);
  require_finite(out, "sigmoid");
  return out;
}

// Takes the forward output y = sigmoid(x).
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  y.require_same_shape(dy, "sigmoid_backward");
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= y[i] * (T{1} - y[i]);
  return dx;
}

// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  Tensor<T> out = x;
  for (auto& v : out.data()) v = T(0.5) * v * (T{1} + std::erf(v * kInvSqrt2));
  require_finite(out, "gelu");
  return out;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  x.require_same_shape(dy, "gelu_backward");
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const T v = x[i];
    const T cdf = T(0.5) * (T{1} + std::erf(v * kInvSqrt2));
    const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
    dx[i] *= cdf + v * pdf;
  }
  return dx;
}

// x[rows x n] + b[n] broadcast over rows.
template <typename T>
Tensor<T> add_row_vector(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.cols() != b.size()) {
    throw DimensionError("add_row_vector: " + shape_str(x.shape()) + " vs bias " +
                         shape_str(b.shape()));
  }
  Tensor<T> out = x;
  const std::size_t n = b.size();
  for (std::size_t i = 0; i < out.rows(); ++i) {
    T* r = out.row(i);
    for (std::size_t j = 0; j < n; ++j) r[j] += b[j];
  }
  require_finite(out, "add_row_vector");
  return out;
}

// Column sums of a [rows x n] tensor, accumulated into `acc` (shape [n]).
template <typename T>
void accumulate_col_sum(const Tensor<T>& x, Tensor<T>& acc) {
  const std::size_t n = x.cols();
  if (acc.size() != n) throw DimensionError("accumulate_col_sum: width mismatch");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const T* r = x.row(i);
    for (std::size_t j = 0; j < n; ++j) acc[j] += r[j];
  }
}

// ---------------------------------------------------------------------------
// Axis reductions and re-arrangement

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("mean_axis: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) os.push_back(s[i]);
  }
  if (os.empty()) os.push_back(1);
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o) {
    T* dst = out.ptr() + o * inner;
    for (std::size_t a = 0; a < n; ++a) {
      const T* src = x.ptr() + (o * n + a) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
    for (std::size_t i = 0; i < inner; ++i) dst[i] /= static_cast<T>(n);
  }
  return out;
}

template <typename T>
Tensor<T> mean_axis_backward(const Shape& in_shape, std::size_t axis, const Tensor<T>& dy) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in_shape[i];
  for (std::size_t i = axis + 1; i < in_shape.size(); ++i) inner *= in_shape[i];
  const std::size_t n = in_shape[axis];
  if (dy.size() != outer * inner) throw DimensionError("mean_axis_backward: gradient size mismatch");
  Tensor<T> dx(in_shape);
  const T inv = T{1} / static_cast<T>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t a = 0; a < n; ++a) {
      T* dst = dx.ptr() + (o * n + a) * inner;
      const T* src = dy.ptr() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i] * inv;
    }
  }
  return dx;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    }
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o) {
    T* dst = out.ptr() + o * total * inner;
    for (const auto& p : parts) {
      const std::size_t chunk = p.dim(axis) * inner;
      const T* src = p.ptr() + o * chunk;
      std::copy(src, src + chunk, dst);
      dst += chunk;
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis,
                             const std::vector<std::size_t>& sizes) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("split: axis out of range for " + shape_str(s));
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != s[axis]) {
    throw DimensionError("split: sizes do not sum to extent of axis in " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  std::vector<Tensor<T>> out;
  out.reserve(sizes.size());
  for (std::size_t sz : sizes) {
    Shape ps = s;
    ps[axis] = sz;
    out.emplace_back(ps);
  }
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = x.ptr() + o * s[axis] * inner;
    for (std::size_t p = 0; p < sizes.size(); ++p) {
      const std::size_t chunk = sizes[p] * inner;
      std::copy(src, src + chunk, out[p].ptr() + o * chunk);
      src += chunk;
    }
  }
  return out;
}

// Mean over non-overlapping r x r blocks of a grid given as tokens
// x[(h*w) x c] in row-major grid order. Output block g (row-major over the
// (h/r) x (w/r) block grid) is the arithmetic mean of its r^2 tokens.
template <typename T>
Tensor<T> block_mean_pool(const Tensor<T>& x, std::size_t h, std::size_t w, std::size_t r) {
  if (r == 0 || h % r != 0 || w % r != 0) {
    throw ConfigError("block_mean_pool: grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by " + std::to_string(r));
  }
  if (x.rows() != h * w) {
    throw DimensionError("block_mean_pool: expected " + std::to_string(h * w) + " tokens, got " +
                         shape_str(x.shape()));
  }
  const std::size_t c = x.cols(), bw = w / r;
  Tensor<T> out({(h / r) * bw, c});
  const T inv = T{1} / static_cast<T>(r * r);
  for (std::size_t by = 0; by < h / r; ++by) {
    for (std::size_t bx = 0; bx < bw; ++bx) {
      T* dst = out.row(by * bw + bx);
      for (std::size_t dy = 0; dy < r; ++dy) {
        for (std::size_t dx = 0; dx < r; ++dx) {
          const T* src = x.row((by * r + dy) * w + bx * r + dx);
          for (std::size_t q = 0; q < c; ++q) dst[q] += src[q];
        }
      }
      for (std::size_t q = 0; q < c; ++q) dst[q] *= inv;
    }
  }
  return out;
}

template <typename T>
Tensor<T> block_mean_pool_backward(const Tensor<T>& dy, std::size_t h, std::size_t w,
                                   std::size_t r) {
  const std::size_t c = dy.cols(), bw = w / r;
  Tensor<T> dx({h * w, c});
  const T inv = T{1} / static_cast<T>(r * r);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const T* src = dy.row((y / r) * bw + x / r);
      T* dst = dx.row(y * w + x);
      for (std::size_t q = 0; q < c; ++q) dst[q] = src[q] * inv;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Softmax

// Softmax over the last axis.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> out = x;
  const std::size_t n = x.shape().back();
  for (std::size_t r = 0; r < x.size() / n; ++r) detail::softmax_row(out.ptr() + r * n, n);
  require_finite(out, "softmax_rows");
  return out;
}

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  y.require_same_shape(dy, "softmax_rows_backward");
  Tensor<T> dx(y.shape());
  const std::size_t n = y.shape().back();
  for (std::size_t r = 0; r < y.size() / n; ++r) {
    detail::softmax_row_backward(y.ptr() + r * n, dy.ptr() + r * n, dx.ptr() + r * n, n);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Selection primitives

// Indices of the k largest scores, highest first; equal scores keep the lower
// index first.
template <typename T>
IndexList topk_indices(std::span<const T> scores, std::size_t k) {
  if (k == 0 || k > scores.size()) {
    throw SelectionError("topk_indices: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(scores.size()) + "]");
  }
  IndexList idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  return idx;
}

template <typename T>
IndexList topk_indices(const Tensor<T>& scores, std::size_t k) {
  return topk_indices(scores.data(), k);
}

// Rows of x (viewed as [L x c]) picked by `indices`.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const IndexList& indices) {
  const std::size_t L = x.rows();
  const std::size_t c = x.cols();
  if (indices.empty()) throw IndexError("gather_rows: empty index list");
  Tensor<T> out({indices.size(), c});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= L) {
      throw IndexError("gather_rows: index " + std::to_string(indices[j]) + " out of range [0, " +
                       std::to_string(L) + ")");
    }
    std::copy(x.row(indices[j]), x.row(indices[j]) + c, out.row(j));
  }
  return out;
}

// Scatter-add of upstream rows back to an [L x c] gradient.
template <typename T>
Tensor<T> gather_rows_backward(std::size_t L, const IndexList& indices, const Tensor<T>& dy) {
  const std::size_t c = dy.cols();
  Tensor<T> dx({L, c});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= L) throw IndexError("gather_rows_backward: index out of range");
    T* dst = dx.row(indices[j]);
    const T* src = dy.row(j);
    for (std::size_t q = 0; q < c; ++q) dst[q] += src[q];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> mean;
  std::vector<T> var;
  std::vector<T> inv_std;
};

// Normalizes each feature over the batch axis of x[B x F] using batch
// statistics (biased variance).
template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          BatchNormCache<T>& cache) {
  detail::require_rank(x.shape(), 2, "batchnorm_train");
  const std::size_t B = x.dim(0), F = x.dim(1);
  if (B < 2) throw DimensionError("batchnorm_train: batch statistics need batch size >= 2");
  if (gamma.size() != F || beta.size() != F) throw DimensionError("batchnorm_train: affine width");
  cache.mean.assign(F, T{0});
  cache.var.assign(F, T{0});
  cache.inv_std.assign(F, T{0});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) cache.mean[f] += x(b, f);
  }
  for (std::size_t f = 0; f < F; ++f) cache.mean[f] /= static_cast<T>(B);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) {
      const T d = x(b, f) - cache.mean[f];
      cache.var[f] += d * d;
    }
  }
  for (std::size_t f = 0; f < F; ++f) {
    cache.var[f] /= static_cast<T>(B);
    cache.inv_std[f] = T{1} / std::sqrt(cache.var[f] + static_cast<T>(kNormEps));
  }
  cache.xhat = Tensor<T>({B, F});
  Tensor<T> y({B, F});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) {
      const T xh = (x(b, f) - cache.mean[f]) * cache.inv_std[f];
      cache.xhat(b, f) = xh;
      y(b, f) = gamma[f] * xh + beta[f];
    }
  }
  require_finite(y, "batchnorm_train");
  return y;
}

template <typename T>
Tensor<T> batchnorm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                         const Tensor<T>& running_mean, const Tensor<T>& running_var) {
  detail::require_rank(x.shape(), 2, "batchnorm_eval");
  const std::size_t B = x.dim(0), F = x.dim(1);
  Tensor<T> y({B, F});
  for (std::size_t f = 0; f < F; ++f) {
    const T inv = T{1} / std::sqrt(running_var[f] + static_cast<T>(kNormEps));
    for (std::size_t b = 0; b < B; ++b) {
      y(b, f) = gamma[f] * (x(b, f) - running_mean[f]) * inv + beta[f];
    }
  }
  require_finite(y, "batchnorm_eval");
  return y;
}

template <typename T>
struct AffineNormGrads {
  Tensor<T> dx;
  Tensor<T> dgamma;
  Tensor<T> dbeta;
};

template <typename T>
AffineNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                                      const Tensor<T>& dy) {
  const std::size_t B = dy.dim(0), F = dy.dim(1);
  AffineNormGrads<T> g{Tensor<T>({B, F}), Tensor<T>({F}), Tensor<T>({F})};
  for (std::size_t f = 0; f < F; ++f) {
    T sum_d{0}, sum_dx{0};
    for (std::size_t b = 0; b < B; ++b) {
      const T d = dy(b, f) * gamma[f];
      sum_d += d;
      sum_dx += d * cache.xhat(b, f);
      g.dgamma[f] += dy(b, f) * cache.xhat(b, f);
      g.dbeta[f] += dy(b, f);
    }
    const T n = static_cast<T>(B);
    for (std::size_t b = 0; b < B; ++b) {
      const T d = dy(b, f) * gamma[f];
      g.dx(b, f) = cache.inv_std[f] / n * (n * d - sum_d - cache.xhat(b, f) * sum_dx);
    }
  }
  return g;
}

// running = (1 - momentum) * running + momentum * batch, unbiased batch variance.
template <typename T>
void batchnorm_update_running(Tensor<T>& running_mean, Tensor<T>& running_var,
                              const BatchNormCache<T>& cache, std::size_t batch) {
  const T m = static_cast<T>(kBatchNormMomentum);
  const T unbias = static_cast<T>(batch) / static_cast<T>(batch - 1);
  for (std::size_t f = 0; f < running_mean.size(); ++f) {
    running_mean[f] = (T{1} - m) * running_mean[f] + m * cache.mean[f];
    running_var[f] = (T{1} - m) * running_var[f] + m * cache.var[f] * unbias;
  }
}

template <typename T>
struct LayerNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

// Per-row normalization over the last axis of x[L x F].
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    LayerNormCache<T>& cache) {
  const std::size_t L = x.rows(), F = x.cols();
  if (gamma.size() != F || beta.size() != F) throw DimensionError("layernorm: affine width");
  cache.xhat = Tensor<T>(x.shape());
  cache.inv_std.assign(L, T{0});
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < L; ++r) {
    const T* xr = x.row(r);
    T mean{0};
    for (std::size_t f = 0; f < F; ++f) mean += xr[f];
    mean /= static_cast<T>(F);
    T var{0};
    for (std::size_t f = 0; f < F; ++f) var += (xr[f] - mean) * (xr[f] - mean);
    var /= static_cast<T>(F);
    const T inv = T{1} / std::sqrt(var + static_cast<T>(kNormEps));
    cache.inv_std[r] = inv;
    T* xh = cache.xhat.row(r);
    T* yr = y.row(r);
    for (std::size_t f = 0; f < F; ++f) {
      xh[f] = (xr[f] - mean) * inv;
      yr[f] = gamma[f] * xh[f] + beta[f];
    }
  }
  require_finite(y, "layernorm");
  return y;
}

template <typename T>
AffineNormGrads<T> layernorm_backward(const LayerNormCache<T>& cache, const Tensor<T>& gamma,
                                      const Tensor<T>& dy) {
  const std::size_t L = dy.rows(), F = dy.cols();
  AffineNormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>({F}), Tensor<T>({F})};
  std::vector<T> d(F);
  for (std::size_t r = 0; r < L; ++r) {
    const T* dyr = dy.row(r);
    const T* xh = cache.xhat.row(r);
    T sum_d{0}, sum_dx{0};
    for (std::size_t f = 0; f < F; ++f) {
      d[f] = dyr[f] * gamma[f];
      sum_d += d[f];
      sum_dx += d[f] * xh[f];
      g.dgamma[f] += dyr[f] * xh[f];
      g.dbeta[f] += dyr[f];
    }
    const T n = static_cast<T>(F);
    T* dx = g.dx.row(r);
    for (std::size_t f = 0; f < F; ++f) {
      dx[f] = cache.inv_std[r] / n * (n * d[f] - sum_d - xh[f] * sum_dx);
    }
  }
  return g;
}

}  // namespace m2f
