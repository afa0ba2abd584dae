#pragma once

// Synthetic fine-grained dataset: each class is a colour plus a texture
// (solid, horizontal stripes, vertical stripes, checker) painted into a box of
// random size and position over a grey noise background. The label depends on
// the signature only; box geometry is drawn independently of it.
//
// Container (little-endian):
//   "M2DS", u32 version, u32 count, u32 height, u32 width, u32 channels,
//   records: u32 label, u32 x, u32 y, u32 w, u32 h, f32 pixels[h*w*c] (HWC)
// Index: "M2DX", u32 version, u32 count, u64 offset of each record.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "m2former/io.hpp"
#include "m2former/rng.hpp"
#include "m2former/tensor.hpp"

namespace m2f {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kNumPatterns = 4;

struct BBox {
  std::uint32_t x = 0, y = 0, w = 0, h = 0;
  std::uint64_t area() const { return std::uint64_t{w} * h; }
};

struct Sample {
  Tensor<float> image;  // [h x w x 3]
  std::uint32_t label = 0;
  BBox box;
};

struct Dataset {
  std::size_t height = 0, width = 0, channels = 3;
  std::vector<Sample> samples;
  std::size_t size() const { return samples.size(); }
};

inline std::array<float, 3> class_color(std::size_t label) {
  static constexpr std::array<std::array<float, 3>, 8> table{{{0.95f, 0.10f, 0.10f},
                                                              {0.10f, 0.85f, 0.15f},
                                                              {0.15f, 0.25f, 0.95f},
                                                              {0.95f, 0.90f, 0.10f},
                                                              {0.90f, 0.15f, 0.90f},
                                                              {0.10f, 0.90f, 0.90f},
                                                              {0.98f, 0.55f, 0.05f},
                                                              {0.05f, 0.05f, 0.05f}}};
  if (label < table.size()) return table[label];
  // golden-angle hues beyond the table
  const double hue = std::fmod(static_cast<double>(label) * 137.50776405, 360.0) / 60.0;
  const double x = 1.0 - std::abs(std::fmod(hue, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(hue)) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x};
  }
  return {static_cast<float>(0.05 + 0.9 * rgb[0]), static_cast<float>(0.05 + 0.9 * rgb[1]),
          static_cast<float>(0.05 + 0.9 * rgb[2])};
}

inline std::size_t class_pattern(std::size_t label) { return label % kNumPatterns; }

namespace detail {

inline bool pattern_on(std::size_t pattern, std::size_t u, std::size_t v) {
  constexpr std::size_t half = 3;  // 6-pixel period, still visible after 2x downscale
  switch (pattern) {
    case 0: return true;
    case 1: return (v / half) % 2 == 0;
    case 2: return (u / half) % 2 == 0;
    default: return ((u / half) + (v / half)) % 2 == 0;
  }
}

}  // namespace detail

inline Sample render_sample(std::size_t label, std::size_t size, Rng& rng) {
  const std::size_t lo = size / 8;
  const std::size_t hi = static_cast<std::size_t>(static_cast<double>(size) / 1.5);
  Sample s;
  s.label = static_cast<std::uint32_t>(label);
  s.box.w = static_cast<std::uint32_t>(lo + rng.below(hi - lo + 1));
  s.box.h = static_cast<std::uint32_t>(lo + rng.below(hi - lo + 1));
  s.box.x = static_cast<std::uint32_t>(rng.below(size - s.box.w + 1));
  s.box.y = static_cast<std::uint32_t>(rng.below(size - s.box.h + 1));
  s.image = Tensor<float>({size, size, 3});
  for (auto& v : s.image.data()) v = static_cast<float>(rng.uniform(0.35, 0.65));
  const auto color = class_color(label);
  const std::size_t pattern = class_pattern(label);
  for (std::size_t v = 0; v < s.box.h; ++v) {
    for (std::size_t u = 0; u < s.box.w; ++u) {
      float* px = s.image.ptr() + ((s.box.y + v) * size + s.box.x + u) * 3;
      const bool on = detail::pattern_on(pattern, u, v);
      for (std::size_t ch = 0; ch < 3; ++ch) px[ch] = on ? color[ch] : 0.3f * color[ch] + 0.1f;
    }
  }
  return s;
}

// Labels cycle 0..n-1 so every class gets exactly n_per_class records.
inline Dataset generate_split(std::size_t n_classes, std::size_t n_per_class, std::size_t size,
                              std::uint64_t seed) {
  if (size == 0 || size % 32 != 0) throw DimensionError("image size must be a positive multiple of 32");
  if (n_classes == 0 || n_per_class == 0) throw ConfigError("dataset needs at least one class and sample");
  Rng rng(seed);
  Dataset ds;
  ds.height = ds.width = size;
  for (std::size_t i = 0; i < n_classes * n_per_class; ++i) ds.samples.push_back(render_sample(i % n_classes, size, rng));
  return ds;
}

// ---------------------------------------------------------------------------
// Container and index

inline std::vector<std::uint64_t> write_dataset(const std::string& path, const Dataset& ds) {
  auto os = io::open_out(path);
  io::put_magic(os, "M2DS");
  io::put_u32(os, kDatasetVersion);
  io::put_u32(os, static_cast<std::uint32_t>(ds.size()));
  io::put_u32(os, static_cast<std::uint32_t>(ds.height));
  io::put_u32(os, static_cast<std::uint32_t>(ds.width));
  io::put_u32(os, static_cast<std::uint32_t>(ds.channels));
  std::vector<std::uint64_t> offsets;
  std::uint64_t offset = 24;
  const std::size_t pixels = ds.height * ds.width * ds.channels;
  std::string buf(4 * pixels, '\0');
  for (const auto& s : ds.samples) {
    offsets.push_back(offset);
    io::put_u32(os, s.label);
    io::put_u32(os, s.box.x);
    io::put_u32(os, s.box.y);
    io::put_u32(os, s.box.w);
    io::put_u32(os, s.box.h);
    for (std::size_t i = 0; i < pixels; ++i) {
      const std::uint32_t bits = std::bit_cast<std::uint32_t>(s.image[i]);
      for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<char>(bits >> (8 * b));
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    offset += 20 + buf.size();
  }
  if (!os) throw IoError("write failed: " + path);
  return offsets;
}

inline void write_index(const std::string& path, const std::vector<std::uint64_t>& offsets) {
  auto os = io::open_out(path);
  io::put_magic(os, "M2DX");
  io::put_u32(os, kDatasetVersion);
  io::put_u32(os, static_cast<std::uint32_t>(offsets.size()));
  for (auto o : offsets) io::put_u64(os, o);
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<std::uint64_t> read_index(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "M2DX", path);
  if (io::get_u32(is) != kDatasetVersion) throw VersionError(path + ": unsupported index version");
  std::vector<std::uint64_t> offsets(io::get_u32(is));
  for (auto& o : offsets) o = io::get_u64(is);
  return offsets;
}

// Reads every record through the index offsets.
inline Dataset read_dataset(const std::string& path, const std::string& index_path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "M2DS", path);
  if (io::get_u32(is) != kDatasetVersion) throw VersionError(path + ": unsupported dataset version");
  const std::uint32_t count = io::get_u32(is);
  Dataset ds;
  ds.height = io::get_u32(is);
  ds.width = io::get_u32(is);
  ds.channels = io::get_u32(is);
  const auto offsets = read_index(index_path);
  if (offsets.size() != count) throw IoError(index_path + ": record count disagrees with " + path);
  const std::size_t pixels = ds.height * ds.width * ds.channels;
  std::string buf(4 * pixels, '\0');
  for (auto off : offsets) {
    is.seekg(static_cast<std::streamoff>(off));
    Sample s;
    s.label = io::get_u32(is);
    s.box = {io::get_u32(is), io::get_u32(is), io::get_u32(is), io::get_u32(is)};
    io::read_exact(is, buf.data(), buf.size());
    s.image = Tensor<float>({ds.height, ds.width, ds.channels});
    for (std::size_t i = 0; i < pixels; ++i) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(buf[4 * i + b]);
      s.image[i] = std::bit_cast<float>(bits);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

struct SplitPaths {
  std::string container, index;
};

inline SplitPaths split_paths(const std::string& dir, const std::string& split) {
  const auto base = std::filesystem::path(dir) / split;
  return {base.string() + ".m2ds", base.string() + ".m2dx"};
}

inline Dataset load_split(const std::string& dir, const std::string& split) {
  const auto p = split_paths(dir, split);
  return read_dataset(p.container, p.index);
}

inline void save_split(const std::string& dir, const std::string& split, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  const auto p = split_paths(dir, split);
  write_index(p.index, write_dataset(p.container, ds));
}

// ---------------------------------------------------------------------------
// Mean-colour linear probe

// 2x box-filter downscale of an HWC image.
inline Tensor<float> downscale2(const Tensor<float>& img) {
  const std::size_t h = img.dim(0) / 2, w = img.dim(1) / 2, c = img.dim(2);
  Tensor<float> out({h, w, c});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        float acc = 0.0f;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) acc += img[((2 * y + dy) * img.dim(1) + 2 * x + dx) * c + ch];
        }
        out[(y * w + x) * c + ch] = 0.25f * acc;
      }
    }
  }
  return out;
}

// Mean colour inside the (halved) object box of the downscaled image.
inline std::array<double, 3> probe_feature(const Sample& s) {
  const Tensor<float> small = downscale2(s.image);
  const std::size_t w = small.dim(1);
  const std::size_t x0 = s.box.x / 2, y0 = s.box.y / 2;
  const std::size_t x1 = std::max<std::size_t>(x0 + 1, (s.box.x + s.box.w) / 2);
  const std::size_t y1 = std::max<std::size_t>(y0 + 1, (s.box.y + s.box.h) / 2);
  std::array<double, 3> m{0, 0, 0};
  for (std::size_t y = y0; y < y1; ++y) {
    for (std::size_t x = x0; x < x1; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) m[ch] += small[(y * w + x) * 3 + ch];
    }
  }
  const double n = static_cast<double>((x1 - x0) * (y1 - y0));
  for (auto& v : m) v /= n;
  return m;
}

// One-vs-all ridge regression on [mean colour, 1], fitted on `train` and
// scored on `test`. Returns test accuracy.
inline double mean_color_probe(const Dataset& train, const Dataset& test, std::size_t n_classes) {
  constexpr std::size_t D = 4;
  std::array<std::array<double, D>, D> A{};
  std::vector<std::array<double, D>> B(n_classes);
  for (const auto& s : train.samples) {
    const auto f = probe_feature(s);
    const std::array<double, D> x{f[0], f[1], f[2], 1.0};
    for (std::size_t i = 0; i < D; ++i) {
      for (std::size_t j = 0; j < D; ++j) A[i][j] += x[i] * x[j];
      B[s.label][i] += x[i];
    }
  }
  for (std::size_t i = 0; i < D; ++i) A[i][i] += 1e-6;
  // Gauss-Jordan with partial pivoting, one right-hand side per class
  std::vector<std::array<double, D>> W = B;
  for (std::size_t col = 0; col < D; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < D; ++r) {
      if (std::abs(A[r][col]) > std::abs(A[piv][col])) piv = r;
    }
    std::swap(A[col], A[piv]);
    for (auto& w : W) std::swap(w[col], w[piv]);
    for (std::size_t r = 0; r < D; ++r) {
      if (r == col) continue;
      const double f = A[r][col] / A[col][col];
      for (std::size_t j = 0; j < D; ++j) A[r][j] -= f * A[col][j];
      for (auto& w : W) w[r] -= f * w[col];
    }
  }
  for (auto& w : W) {
    for (std::size_t i = 0; i < D; ++i) w[i] /= A[i][i];
  }
  std::size_t correct = 0;
  for (const auto& s : test.samples) {
    const auto f = probe_feature(s);
    const std::array<double, D> x{f[0], f[1], f[2], 1.0};
    std::size_t best = 0;
    double best_v = -INFINITY;
    for (std::size_t c = 0; c < n_classes; ++c) {
      double v = 0.0;
      for (std::size_t i = 0; i < D; ++i) v += W[c][i] * x[i];
      if (v > best_v) best_v = v, best = c;
    }
    correct += best == s.label;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Scale buckets

enum class ScaleBucket { Small, Medium, Large };

inline const char* to_string(ScaleBucket b) {
  switch (b) {
    case ScaleBucket::Small: return "small";
    case ScaleBucket::Medium: return "medium";
    default: return "large";
  }
}

// Inclusive quartile: linear interpolation at position p * (n - 1) of the
// ascending sample (the "inclusive median" convention).
inline double quartile_inclusive(const std::vector<double>& sorted, double p) {
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct BucketResult {
  double q1 = 0.0, q3 = 0.0;
  std::vector<ScaleBucket> labels;  // input order
};

inline BucketResult bucket_by_scale(const std::vector<double>& areas) {
  if (areas.size() < 4) {
    throw BucketError("bucket_by_scale needs at least 4 boxes, got " + std::to_string(areas.size()));
  }
  std::vector<double> sorted = areas;
  std::sort(sorted.begin(), sorted.end());
  BucketResult r;
  r.q1 = quartile_inclusive(sorted, 0.25);
  r.q3 = quartile_inclusive(sorted, 0.75);
  for (double a : areas) {
    r.labels.push_back(a < r.q1 ? ScaleBucket::Small : a > r.q3 ? ScaleBucket::Large : ScaleBucket::Medium);
  }
  return r;
}

inline BucketResult bucket_by_scale(const std::vector<BBox>& boxes) {
  std::vector<double> areas;
  for (const auto& b : boxes) areas.push_back(static_cast<double>(b.area()));
  return bucket_by_scale(areas);
}

inline BucketResult bucket_dataset(const Dataset& ds) {
  std::vector<BBox> boxes;
  for (const auto& s : ds.samples) boxes.push_back(s.box);
  return bucket_by_scale(boxes);
}

}  // namespace m2f
