#pragma once

// Run configuration: a sectioned key=value text format with strict key
// checking, a canonical dump, and a stable hash of that dump.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "sketch/data.hpp"
#include "sketch/encoder.hpp"
#include "sketch/error.hpp"
#include "sketch/training.hpp"
#include "sketch/zero_shot.hpp"

namespace sketch {

struct DataSettings {
  int classes = 10;
  int per_class = 620;
  SplitQuotas quotas{500, 0, 100, 20};
  JitterOptions jitter;
  std::vector<int> exclude_classes;  // kept out of hash training only
};

struct ZslSettings {
  std::vector<int> unseen{7, 8, 9};
  int se_fusion_dim = 32;
  int eve_hidden = 64;
  EmbedDirection direction = EmbedDirection::semantic_to_visual;
  ZslSchedule schedule;
  int aux_per_class = 1;
  std::uint64_t aux_seed = 7;
};

struct EvalSettings {
  std::vector<int> code_bits{16, 24, 32, 64};
  std::vector<int> precision_k{10, 50};
  std::vector<int> hit_k{1, 2, 3, 5};
};

struct RunConfig {
  std::uint64_t seed = 1;
  int threads = 1;
  DataSettings data;
  EncoderConfig encoder;
  TrainSchedule schedule;
  ZslSettings zsl;
  EvalSettings eval;

  RunConfig() {
    encoder.raster_size = 32;
    encoder.fusion_dim = 16;
    schedule.pretrain_cnn_epochs = 1;
    schedule.pretrain_rnn_epochs = 1;
    schedule.fuse_epochs = 1;
    schedule.scl_epochs = 1;
    schedule.alt_iterations = 2;
    schedule.inner_epochs = 1;
    zsl.schedule.epochs = 20;
  }

  /// Seed and thread count pushed into the nested settings.
  void sync() {
    schedule.seed = seed;
    schedule.threads = threads;
    zsl.schedule.seed = seed;
  }

  void validate() const {
    if (threads < 1) fail(ErrorKind::ConfigError, "threads must be >= 1");
    encoder.validate();
    schedule.validate();
    zsl.schedule.validate();
    if (data.classes < 2 || data.classes > static_cast<int>(kShapeFamilies.size()))
      fail(ErrorKind::ConfigError, "data.classes must be in [2, " + std::to_string(kShapeFamilies.size()) + "]");
    if (data.quotas.total() != data.per_class) fail(ErrorKind::ConfigError, "data split quotas must sum to per_class");
    for (int b : eval.code_bits)
      if (b < 1 || b > kMaxCodeBits) fail(ErrorKind::ConfigError, "eval.code_bits out of range");
    for (int k : eval.precision_k)
      if (k < 1) fail(ErrorKind::ConfigError, "eval.precision_k must be >= 1");
    for (int k : eval.hit_k)
      if (k < 1) fail(ErrorKind::ConfigError, "eval.hit_k must be >= 1");
    if (zsl.se_fusion_dim < 1 || zsl.eve_hidden < 1 || zsl.aux_per_class < 1)
      fail(ErrorKind::ConfigError, "zsl dims and aux_per_class must be >= 1");
  }
};

namespace detail {

/// Shortest of %.15g / %.17g that reads back as the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.15g", v);
  if (std::strtod(buf, nullptr) != v) std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class I>
I parse_int(const std::string& s, const std::string& key) {
  I v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) fail(ErrorKind::ConfigError, key + ": not an integer: '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s, const std::string& key) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) fail(ErrorKind::ConfigError, key + ": not a number: '" + s + "'");
  return v;
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(parse_int<int>(item.substr(b, e - b + 1), key));
  }
  return out;
}

inline std::string join(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  fail(ErrorKind::ConfigError, key + ": expected true or false");
}

template <class E>
E parse_enum(const std::string& s, const std::string& key, std::initializer_list<std::pair<const char*, E>> options) {
  std::string names;
  for (const auto& [n, v] : options) {
    if (s == n) return v;
    names += names.empty() ? n : std::string("|") + n;
  }
  fail(ErrorKind::ConfigError, key + ": expected one of " + names);
}

template <class E>
std::string enum_name(E v, std::initializer_list<std::pair<const char*, E>> options) {
  for (const auto& [n, e] : options)
    if (e == v) return n;
  return "?";
}

}  // namespace detail

inline constexpr std::initializer_list<std::pair<const char*, HashVariant>> kVariantNames = {
    {"cel", HashVariant::cel}, {"cel_cl", HashVariant::cel_cl}, {"cel_scl", HashVariant::cel_scl}, {"full", HashVariant::full}};
inline constexpr std::initializer_list<std::pair<const char*, ad::OptimizerKind>> kOptimizerNames = {
    {"adam", ad::OptimizerKind::adam}, {"rmsprop", ad::OptimizerKind::rmsprop}};
inline constexpr std::initializer_list<std::pair<const char*, CenterNormalization>> kNormalizationNames = {
    {"literal_gamma", CenterNormalization::literal_gamma}, {"actual_count", CenterNormalization::actual_count}};
inline constexpr std::initializer_list<std::pair<const char*, ad::Activation>> kFusionNames = {
    {"sigmoid", ad::Activation::sigmoid}, {"relu", ad::Activation::relu}};
inline constexpr std::initializer_list<std::pair<const char*, EmbedDirection>> kDirectionNames = {
    {"semantic_to_visual", EmbedDirection::semantic_to_visual}, {"visual_to_semantic", EmbedDirection::visual_to_semantic}};

struct ConfigKey {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

/// Every accepted key, in dump order.
inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto add_int = [&](const char* sec, const char* key, auto member) {
      k.push_back({sec, key, [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
                   [member, sec, key](RunConfig& c, const std::string& v) {
                     member(c) = parse_int<std::remove_reference_t<decltype(member(c))>>(v, std::string(sec) + "." + key);
                   }});
    };
    auto add_double = [&](const char* sec, const char* key, auto member) {
      k.push_back({sec, key, [member](const RunConfig& c) { return fmt_double(member(const_cast<RunConfig&>(c))); },
                   [member, sec, key](RunConfig& c, const std::string& v) {
                     member(c) = parse_double(v, std::string(sec) + "." + key);
                   }});
    };
    auto add_list = [&](const char* sec, const char* key, auto member) {
      k.push_back({sec, key, [member](const RunConfig& c) { return join(member(const_cast<RunConfig&>(c))); },
                   [member, sec, key](RunConfig& c, const std::string& v) {
                     member(c) = parse_int_list(v, std::string(sec) + "." + key);
                   }});
    };
    auto add_enum = [&](const char* sec, const char* key, auto member, auto options) {
      k.push_back({sec, key, [member, options](const RunConfig& c) { return enum_name(member(const_cast<RunConfig&>(c)), options); },
                   [member, options, sec, key](RunConfig& c, const std::string& v) {
                     member(c) = parse_enum(v, std::string(sec) + "." + key, options);
                   }});
    };

    add_int("run", "seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });
    add_int("run", "threads", [](RunConfig& c) -> int& { return c.threads; });

    add_int("data", "classes", [](RunConfig& c) -> int& { return c.data.classes; });
    add_int("data", "per_class", [](RunConfig& c) -> int& { return c.data.per_class; });
    add_int("data", "train", [](RunConfig& c) -> int& { return c.data.quotas.train; });
    add_int("data", "val", [](RunConfig& c) -> int& { return c.data.quotas.val; });
    add_int("data", "gallery", [](RunConfig& c) -> int& { return c.data.quotas.gallery; });
    add_int("data", "query", [](RunConfig& c) -> int& { return c.data.quotas.query; });
    add_double("data", "rotation_deg", [](RunConfig& c) -> double& { return c.data.jitter.rotation_deg; });
    add_double("data", "scale", [](RunConfig& c) -> double& { return c.data.jitter.scale; });
    add_double("data", "point_noise", [](RunConfig& c) -> double& { return c.data.jitter.point_noise; });
    add_double("data", "split_prob", [](RunConfig& c) -> double& { return c.data.jitter.split_prob; });
    add_list("data", "exclude_classes", [](RunConfig& c) -> std::vector<int>& { return c.data.exclude_classes; });

    add_int("encoder", "raster_size", [](RunConfig& c) -> int& { return c.encoder.raster_size; });
    add_int("encoder", "cnn_stages", [](RunConfig& c) -> int& { return c.encoder.cnn_stages; });
    add_int("encoder", "cnn_channels", [](RunConfig& c) -> int& { return c.encoder.cnn_channels; });
    add_int("encoder", "cnn_out", [](RunConfig& c) -> int& { return c.encoder.cnn_out; });
    add_int("encoder", "rnn_layers", [](RunConfig& c) -> int& { return c.encoder.rnn_layers; });
    add_int("encoder", "rnn_hidden", [](RunConfig& c) -> int& { return c.encoder.rnn_hidden; });
    add_int("encoder", "code_bits", [](RunConfig& c) -> int& { return c.encoder.fusion_dim; });
    add_int("encoder", "num_classes", [](RunConfig& c) -> int& { return c.encoder.num_classes; });

    add_int("schedule", "pretrain_cnn_epochs", [](RunConfig& c) -> int& { return c.schedule.pretrain_cnn_epochs; });
    add_int("schedule", "pretrain_rnn_epochs", [](RunConfig& c) -> int& { return c.schedule.pretrain_rnn_epochs; });
    add_int("schedule", "fuse_epochs", [](RunConfig& c) -> int& { return c.schedule.fuse_epochs; });
    add_int("schedule", "scl_epochs", [](RunConfig& c) -> int& { return c.schedule.scl_epochs; });
    add_int("schedule", "alt_iterations", [](RunConfig& c) -> int& { return c.schedule.alt_iterations; });
    add_int("schedule", "inner_epochs", [](RunConfig& c) -> int& { return c.schedule.inner_epochs; });
    add_int("schedule", "batch_size", [](RunConfig& c) -> int& { return c.schedule.batch_size; });
    add_enum("schedule", "optimizer", [](RunConfig& c) -> ad::OptimizerKind& { return c.schedule.optimizer.kind; }, kOptimizerNames);
    add_double("schedule", "lr", [](RunConfig& c) -> double& { return c.schedule.optimizer.lr; });
    add_double("schedule", "phi", [](RunConfig& c) -> double& { return c.schedule.phi; });
    add_double("schedule", "varphi", [](RunConfig& c) -> double& { return c.schedule.varphi; });
    add_enum("schedule", "normalization", [](RunConfig& c) -> CenterNormalization& { return c.schedule.normalization; },
             kNormalizationNames);
    add_enum("schedule", "variant", [](RunConfig& c) -> HashVariant& { return c.schedule.variant; }, kVariantNames);
    add_double("schedule", "cl_alpha", [](RunConfig& c) -> double& { return c.schedule.cl_alpha; });

    add_double("loss", "lambda_scl", [](RunConfig& c) -> double& { return c.schedule.weights.lambda_scl; });
    add_double("loss", "lambda_ql", [](RunConfig& c) -> double& { return c.schedule.weights.lambda_ql; });
    add_double("loss", "lambda_zsl", [](RunConfig& c) -> double& { return c.zsl.schedule.lambda; });

    add_list("zsl", "unseen", [](RunConfig& c) -> std::vector<int>& { return c.zsl.unseen; });
    add_int("zsl", "se_code_dim", [](RunConfig& c) -> int& { return c.zsl.se_fusion_dim; });
    add_int("zsl", "eve_hidden", [](RunConfig& c) -> int& { return c.zsl.eve_hidden; });
    add_enum("zsl", "direction", [](RunConfig& c) -> EmbedDirection& { return c.zsl.direction; }, kDirectionNames);
    add_int("zsl", "epochs", [](RunConfig& c) -> int& { return c.zsl.schedule.epochs; });
    add_int("zsl", "batch_size", [](RunConfig& c) -> int& { return c.zsl.schedule.batch_size; });
    add_double("zsl", "lr", [](RunConfig& c) -> double& { return c.zsl.schedule.optimizer.lr; });
    add_int("zsl", "aux_per_class", [](RunConfig& c) -> int& { return c.zsl.aux_per_class; });
    add_int("zsl", "aux_seed", [](RunConfig& c) -> std::uint64_t& { return c.zsl.aux_seed; });

    add_list("eval", "code_bits", [](RunConfig& c) -> std::vector<int>& { return c.eval.code_bits; });
    add_list("eval", "precision_k", [](RunConfig& c) -> std::vector<int>& { return c.eval.precision_k; });
    add_list("eval", "hit_k", [](RunConfig& c) -> std::vector<int>& { return c.eval.hit_k; });
    return k;
  }();
  return keys;
}

/// Applies `section.key = value`; unknown keys are a ConfigError.
inline void set_config_value(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys())
    if (k.section == section && k.key == key) {
      k.set(cfg, value);
      return;
    }
  fail(ErrorKind::ConfigError, "unknown key '" + section + "." + key + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

/// Reads `[section]` headers and `key = value` lines over the defaults.
/// Blank lines and lines starting with '#' or ';' are ignored.
inline RunConfig parse_config(std::istream& in, RunConfig cfg = {}) {
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (t.front() == '[') {
      if (t.back() != ']') fail(ErrorKind::ConfigError, where + "unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) fail(ErrorKind::ConfigError, where + "expected key = value");
    if (section.empty()) fail(ErrorKind::ConfigError, where + "key outside any section");
    try {
      set_config_value(cfg, section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const Error& e) {
      fail(ErrorKind::ConfigError, where + e.what());
    }
  }
  return cfg;
}

/// Every key with its value, grouped by section; parse_config(dump) restores
/// the same configuration.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& k : config_keys()) {
    if (k.section != section) {
      out += (section.empty() ? "[" : "\n[") + k.section + "]\n";
      section = k.section;
    }
    out += k.key + " = " + k.get(cfg) + "\n";
  }
  return out;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace sketch
