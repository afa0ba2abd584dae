#pragma once

// Checkpoint layout (little-endian):
//   "M2CK", u32 version, u32 dtype (0 = f32, 1 = f64), bytes config_text,
//   u64 config_hash, u64 step,
//   u32 param_count,  records: bytes name, u32 rank, u64 dims[rank], payload
//   u32 buffer_count, records as above
// `bytes` is a u32 length followed by raw characters. Payload elements use
// the stored dtype.

#include <cstdint>
#include <string>
#include <type_traits>

#include "m2former/io.hpp"
#include "m2former/model.hpp"

namespace m2f {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint32_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

inline const char* to_string(DType d) { return d == DType::F32 ? "f32" : "f64"; }

namespace detail {

template <typename T>
void write_records(std::ostream& os, const ParamSet<T>& set) {
  io::put_u32(os, static_cast<std::uint32_t>(set.size()));
  std::string buf;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Tensor<T>& t = set.value(i);
    io::put_bytes(os, set.name(i));
    io::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) io::put_u64(os, d);
    buf.assign(sizeof(T) * t.size(), '\0');
    for (std::size_t j = 0; j < t.size(); ++j) {
      std::uint64_t bits;
      if constexpr (std::is_same_v<T, float>) bits = std::bit_cast<std::uint32_t>(t[j]);
      else bits = std::bit_cast<std::uint64_t>(t[j]);
      for (std::size_t b = 0; b < sizeof(T); ++b) buf[sizeof(T) * j + b] = static_cast<char>(bits >> (8 * b));
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
}

// Reads records into `set`, converting from the stored dtype. Every stored
// record must exist in `set` with the same shape and vice versa.
template <typename T>
void read_records(std::istream& is, DType stored, ParamSet<T>& set, const std::string& what) {
  const std::uint32_t n = io::get_u32(is);
  if (n != set.size()) {
    throw VersionError(what + ": checkpoint holds " + std::to_string(n) + " tensors, model expects " +
                       std::to_string(set.size()));
  }
  const std::size_t width = stored == DType::F32 ? 4 : 8;
  std::string buf;
  for (std::uint32_t r = 0; r < n; ++r) {
    const std::string name = io::get_bytes(is, 4096);
    if (!set.contains(name)) throw VersionError(what + ": unexpected tensor '" + name + "'");
    Tensor<T>& t = set.at(name);
    Shape shape(io::get_u32(is));
    for (auto& d : shape) d = io::get_u64(is);
    if (shape != t.shape()) {
      throw VersionError(what + ": tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                         shape_str(t.shape()));
    }
    buf.resize(width * t.size());
    io::read_exact(is, buf.data(), buf.size());
    for (std::size_t j = 0; j < t.size(); ++j) {
      std::uint64_t bits = 0;
      for (std::size_t b = width; b-- > 0;) bits = (bits << 8) | static_cast<unsigned char>(buf[width * j + b]);
      t[j] = stored == DType::F32 ? static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)))
                                  : static_cast<T>(std::bit_cast<double>(bits));
    }
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, std::uint64_t step) {
  auto os = io::open_out(path);
  io::put_magic(os, "M2CK");
  io::put_u32(os, kCheckpointVersion);
  io::put_u32(os, static_cast<std::uint32_t>(dtype_of<T>()));
  const std::string text = model.config().to_text();
  io::put_bytes(os, text);
  io::put_u64(os, model.config().hash());
  io::put_u64(os, step);
  detail::write_records(os, model.params());
  detail::write_records(os, model.buffers());
  if (!os) throw IoError("write failed: " + path);
}

struct CheckpointInfo {
  ModelConfig config;
  DType dtype = DType::F32;
  std::uint64_t hash = 0;
  std::uint64_t step = 0;
};

namespace detail {

inline CheckpointInfo read_checkpoint_header(std::istream& is, const std::string& path) {
  io::expect_magic(is, "M2CK", path);
  const std::uint32_t version = io::get_u32(is);
  if (version != kCheckpointVersion) {
    throw VersionError(path + ": checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  CheckpointInfo info;
  const std::uint32_t dt = io::get_u32(is);
  if (dt > 1) throw VersionError(path + ": unknown dtype code " + std::to_string(dt));
  info.dtype = static_cast<DType>(dt);
  const std::string text = io::get_bytes(is);
  info.hash = io::get_u64(is);
  info.step = io::get_u64(is);
  info.config = parse_config(text);
  if (info.config.hash() != info.hash) throw VersionError(path + ": stored config hash does not match its config");
  return info;
}

}  // namespace detail

inline CheckpointInfo read_checkpoint_info(const std::string& path) {
  auto is = io::open_in(path);
  return detail::read_checkpoint_header(is, path);
}

// Loads a checkpoint into a fresh model. With `expected` set, refuses a
// checkpoint whose stored config hash differs from expected->hash().
template <typename T>
Model<T> load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr,
                         CheckpointInfo* info_out = nullptr) {
  auto is = io::open_in(path);
  CheckpointInfo info = detail::read_checkpoint_header(is, path);
  if (expected && expected->hash() != info.hash) {
    throw VersionError(path + ": config hash " + hash_hex(info.hash) + " does not match expected " +
                       hash_hex(expected->hash()));
  }
  Model<T> model(info.config);
  detail::read_records(is, info.dtype, model.params(), path);
  detail::read_records(is, info.dtype, model.buffers(), path);
  if (info_out) *info_out = info;
  return model;
}

}  // namespace m2f
