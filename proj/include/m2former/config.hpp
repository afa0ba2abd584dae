#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "m2former/errors.hpp"

namespace m2f {

inline constexpr std::size_t kNumStages = 4;

// 0-based stage index -> "stage1".."stage4" as used in parameter names.
inline std::string stage_name(std::size_t stage) { return "stage" + std::to_string(stage + 1); }

// How the class token reaches each stage's selected patches.
enum class AttachMode {
  GlobalPool,    // no class token rows; heads read pooled patch means
  SimpleAttach,  // each stage re-attaches its own detached class token
  Ctt1Mlp,       // bare linear projection of the global token
  Ctt2Mlp,       // two linear maps with batch normalization and ReLU between
};

inline std::string to_string(AttachMode m) {
  switch (m) {
    case AttachMode::GlobalPool: return "global_pool";
    case AttachMode::SimpleAttach: return "simple_attach";
    case AttachMode::Ctt1Mlp: return "ctt_1mlp";
    case AttachMode::Ctt2Mlp: return "ctt_2mlp";
  }
  return "?";
}

inline AttachMode parse_attach_mode(const std::string& s) {
  if (s == "global_pool") return AttachMode::GlobalPool;
  if (s == "simple_attach") return AttachMode::SimpleAttach;
  if (s == "ctt_1mlp") return AttachMode::Ctt1Mlp;
  if (s == "ctt_2mlp") return AttachMode::Ctt2Mlp;
  throw ConfigError("unknown ctt_mode '" + s +
                    "' (expected global_pool, simple_attach, ctt_1mlp or ctt_2mlp)");
}

struct ModelConfig {
  // architecture
  std::size_t input_size = 128;
  std::size_t in_channels = 3;
  std::array<std::size_t, kNumStages> stage_channels{16, 32, 64, 128};
  std::array<std::size_t, kNumStages> stage_depths{1, 1, 1, 1};
  std::array<std::size_t, kNumStages> stage_heads{1, 1, 2, 4};
  std::size_t merge_factor = 2;
  std::array<std::size_t, kNumStages> k_schedule{32, 16, 8, 2};
  std::size_t attention_dim = 128;
  std::size_t msca_heads = 2;
  std::size_t num_classes = 4;
  // (y1, y2, y3, y4, y_con)
  std::array<double, kNumStages + 1> alpha_schedule{0.6, 0.7, 0.8, 0.9, 1.0};
  std::uint64_t seed = 1;

  // mechanism switches; stages are 1-based
  std::vector<std::size_t> msps_stages{1, 2, 3, 4};
  AttachMode ctt_mode = AttachMode::Ctt2Mlp;
  bool cca = true;
  bool sca = true;
  std::size_t num_msca_blocks = 1;

  // training recipe
  std::size_t batch_size = 8;
  double learning_rate = 0.01;
  std::size_t steps = 2000;
  std::size_t eval_interval = 50;
  double momentum = 0.9;
  double weight_decay = 0.0;
  // stop at the first evaluation whose aggregate train accuracy reaches this
  // value; 0 disables early stopping
  double target_accuracy = 0.95;
  // early stopping never fires before this step
  std::size_t min_steps = 200;

  static ModelConfig toy() { return ModelConfig{}; }

  // Full-scale geometry: 448 input, channels 96..768, k = (162, 54, 18, 6).
  static ModelConfig full_scale() {
    ModelConfig c;
    c.input_size = 448;
    c.stage_channels = {96, 192, 384, 768};
    c.stage_depths = {1, 1, 1, 1};
    c.stage_heads = {1, 2, 4, 8};
    c.k_schedule = {162, 54, 18, 6};
    c.attention_dim = 768;
    c.msca_heads = 8;
    c.num_classes = 200;
    return c;
  }

  std::size_t grid_side(std::size_t stage) const { return input_size / (std::size_t{4} << stage); }
  std::size_t grid_tokens(std::size_t stage) const { return grid_side(stage) * grid_side(stage); }
  std::size_t merged_count(std::size_t stage) const {
    return grid_tokens(stage) / (merge_factor * merge_factor);
  }

  bool stage_active(std::size_t stage) const {
    return std::find(msps_stages.begin(), msps_stages.end(), stage + 1) != msps_stages.end();
  }
  // 0-based indices of the stages that run selection, ascending.
  std::vector<std::size_t> active_stages() const {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < kNumStages; ++s) {
      if (stage_active(s)) out.push_back(s);
    }
    return out;
  }
  bool bare_backbone() const { return msps_stages.empty(); }
  bool has_cls_rows() const { return ctt_mode != AttachMode::GlobalPool; }

  std::size_t joint_channels() const {
    std::size_t c = 0;
    for (std::size_t s : active_stages()) c += stage_channels[s];
    return c;
  }

  void validate() const;
  std::string to_text() const;
  std::uint64_t hash() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected non-negative integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected on/off, got '" + v + "'");
}

template <std::size_t N>
std::array<std::size_t, N> parse_size_array(const std::string& key, const std::string& v) {
  const auto items = split_list(v);
  if (items.size() != N) {
    throw ConfigError("config key '" + key + "': expected " + std::to_string(N) + " values");
  }
  std::array<std::size_t, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = parse_size(key, items[i]);
  return out;
}

template <typename It>
std::string join(It first, It last) {
  std::ostringstream os;
  for (It it = first; it != last; ++it) {
    if (it != first) os << ',';
    os << *it;
  }
  return os.str();
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// key = value lines; '#' starts a comment. Unknown keys are rejected.
inline ModelConfig parse_config(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string v = detail::trim(line.substr(eq + 1));
    using namespace detail;
    if (key == "input_size") c.input_size = parse_size(key, v);
    else if (key == "in_channels") c.in_channels = parse_size(key, v);
    else if (key == "stage_channels") c.stage_channels = parse_size_array<kNumStages>(key, v);
    else if (key == "stage_depths") c.stage_depths = parse_size_array<kNumStages>(key, v);
    else if (key == "stage_heads") c.stage_heads = parse_size_array<kNumStages>(key, v);
    else if (key == "merge_factor") c.merge_factor = parse_size(key, v);
    else if (key == "k_schedule") c.k_schedule = parse_size_array<kNumStages>(key, v);
    else if (key == "attention_dim") c.attention_dim = parse_size(key, v);
    else if (key == "msca_heads") c.msca_heads = parse_size(key, v);
    else if (key == "num_classes") c.num_classes = parse_size(key, v);
    else if (key == "alpha_schedule") {
      const auto items = split_list(v);
      if (items.size() != kNumStages + 1) throw ConfigError("alpha_schedule: expected 5 values");
      for (std::size_t i = 0; i < items.size(); ++i) c.alpha_schedule[i] = parse_double(key, items[i]);
    } else if (key == "seed") c.seed = parse_size(key, v);
    else if (key == "msps_stages") {
      c.msps_stages.clear();
      if (v != "none") {
        for (const auto& item : split_list(v)) c.msps_stages.push_back(parse_size(key, item));
      }
    } else if (key == "ctt_mode") c.ctt_mode = parse_attach_mode(v);
    else if (key == "cca") c.cca = parse_bool(key, v);
    else if (key == "sca") c.sca = parse_bool(key, v);
    else if (key == "num_msca_blocks") c.num_msca_blocks = parse_size(key, v);
    else if (key == "batch_size") c.batch_size = parse_size(key, v);
    else if (key == "learning_rate") c.learning_rate = parse_double(key, v);
    else if (key == "steps") c.steps = parse_size(key, v);
    else if (key == "eval_interval") c.eval_interval = parse_size(key, v);
    else if (key == "momentum") c.momentum = parse_double(key, v);
    else if (key == "weight_decay") c.weight_decay = parse_double(key, v);
    else if (key == "target_accuracy") c.target_accuracy = parse_double(key, v);
    else if (key == "min_steps") c.min_steps = parse_size(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  std::sort(c.msps_stages.begin(), c.msps_stages.end());
  c.validate();
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

inline void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (input_size == 0 || input_size % 32 != 0) {
    fail("input_size must be a positive multiple of 32, got " + std::to_string(input_size));
  }
  if (in_channels == 0) fail("in_channels must be positive");
  if (stage_channels[0] == 0) fail("stage_channels must be positive");
  for (std::size_t s = 0; s + 1 < kNumStages; ++s) {
    if (stage_channels[s + 1] != 2 * stage_channels[s]) {
      fail("stage_channels must double from stage to stage");
    }
  }
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (stage_heads[s] == 0 || stage_channels[s] % stage_heads[s] != 0) {
      fail("stage " + std::to_string(s + 1) + ": channels not divisible by heads");
    }
  }
  if (merge_factor == 0) fail("merge_factor must be positive");
  for (std::size_t st : msps_stages) {
    if (st < 1 || st > kNumStages) fail("msps_stages entries must be in 1..4");
  }
  for (std::size_t i = 1; i < msps_stages.size(); ++i) {
    if (msps_stages[i] <= msps_stages[i - 1]) fail("msps_stages must be ascending and unique");
  }
  for (std::size_t s : active_stages()) {
    const std::size_t side = grid_side(s);
    if (side % merge_factor != 0) {
      fail("stage " + std::to_string(s + 1) + ": grid side " + std::to_string(side) +
           " not divisible by merge_factor " + std::to_string(merge_factor));
    }
    if (k_schedule[s] == 0 || k_schedule[s] > merged_count(s)) {
      throw SelectionError("stage " + std::to_string(s + 1) + ": k=" +
                           std::to_string(k_schedule[s]) + " infeasible for " +
                           std::to_string(merged_count(s)) + " merged patches");
    }
  }
  for (std::size_t i = 0; i < alpha_schedule.size(); ++i) {
    if (alpha_schedule[i] < 0.0 || alpha_schedule[i] > 1.0) fail("alpha values must lie in [0,1]");
    if (i > 0 && alpha_schedule[i] < alpha_schedule[i - 1]) {
      fail("alpha_schedule must be non-decreasing");
    }
  }
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (!bare_backbone()) {
    if (attention_dim == 0 || msca_heads == 0 || attention_dim % msca_heads != 0) {
      fail("attention_dim must be divisible by msca_heads");
    }
    if (cca && joint_channels() % 2 != 0) {
      fail("joint channel count " + std::to_string(joint_channels()) +
           " is odd; channel attention needs an integral bottleneck");
    }
    if (num_msca_blocks == 0) fail("num_msca_blocks must be at least 1");
  }
  if (batch_size < 2) fail("batch_size must be at least 2 (batch normalization)");
  if (learning_rate <= 0.0) fail("learning_rate must be positive");
  if (eval_interval == 0) fail("eval_interval must be positive");
  if (momentum < 0.0 || momentum >= 1.0) fail("momentum must lie in [0,1)");
  if (target_accuracy < 0.0 || target_accuracy > 1.0) fail("target_accuracy must lie in [0,1]");
}

inline std::string ModelConfig::to_text() const {
  using detail::fmt_double;
  using detail::join;
  std::ostringstream os;
  os << "input_size = " << input_size << '\n';
  os << "in_channels = " << in_channels << '\n';
  os << "stage_channels = " << join(stage_channels.begin(), stage_channels.end()) << '\n';
  os << "stage_depths = " << join(stage_depths.begin(), stage_depths.end()) << '\n';
  os << "stage_heads = " << join(stage_heads.begin(), stage_heads.end()) << '\n';
  os << "merge_factor = " << merge_factor << '\n';
  os << "k_schedule = " << join(k_schedule.begin(), k_schedule.end()) << '\n';
  os << "attention_dim = " << attention_dim << '\n';
  os << "msca_heads = " << msca_heads << '\n';
  os << "num_classes = " << num_classes << '\n';
  os << "alpha_schedule = ";
  for (std::size_t i = 0; i < alpha_schedule.size(); ++i) {
    os << (i ? "," : "") << fmt_double(alpha_schedule[i]);
  }
  os << '\n';
  os << "seed = " << seed << '\n';
  os << "msps_stages = "
     << (msps_stages.empty() ? std::string("none") : join(msps_stages.begin(), msps_stages.end()))
     << '\n';
  os << "ctt_mode = " << to_string(ctt_mode) << '\n';
  os << "cca = " << (cca ? "on" : "off") << '\n';
  os << "sca = " << (sca ? "on" : "off") << '\n';
  os << "num_msca_blocks = " << num_msca_blocks << '\n';
  os << "batch_size = " << batch_size << '\n';
  os << "learning_rate = " << fmt_double(learning_rate) << '\n';
  os << "steps = " << steps << '\n';
  os << "eval_interval = " << eval_interval << '\n';
  os << "momentum = " << fmt_double(momentum) << '\n';
  os << "weight_decay = " << fmt_double(weight_decay) << '\n';
  os << "target_accuracy = " << fmt_double(target_accuracy) << '\n';
  os << "min_steps = " << min_steps << '\n';
  return os.str();
}

inline std::uint64_t ModelConfig::hash() const { return detail::fnv1a64(to_text()); }

inline std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace m2f
