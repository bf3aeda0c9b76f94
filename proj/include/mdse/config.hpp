// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat key = value file, overridable per key.
//
//   # comment
//   train.lr = 0.001
//   model.expert_hidden = 512,512,512
//
// Relative paths resolve against `home`, which defaults to $MDSE_HOME or
// the working directory.

#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mdse/binary_io.hpp"
#include "mdse/data.hpp"
#include "mdse/error.hpp"
#include "mdse/mask.hpp"
#include "mdse/mode.hpp"
#include "mdse/pretrain.hpp"
#include "mdse/train.hpp"

namespace mdse::config {

using Index = Eigen::Index;

struct Paths {
  std::filesystem::path clean = "corpus/clean";
  std::filesystem::path noise = "corpus/noise";
  std::filesystem::path test_clean = "corpus/test_clean";
  std::filesystem::path data = "data";
  std::filesystem::path models = "models";
  std::filesystem::path reports = "reports";
};

struct RunConfig {
  std::filesystem::path home = ".";
  Paths paths;
  data::FeatureConfig features;
  std::vector<double> train_snrs{0.0, 5.0};
  std::vector<double> test_snrs{0.0, 5.0};
  double train_fraction = 0.9;
  std::uint64_t data_seed = 1;

  int num_experts = 3;
  std::vector<Index> expert_hidden{512, 512, 512};
  std::vector<Index> gate_hidden{512, 512, 512};
  bool batchnorm = true;

  std::vector<Index> ae_hidden{256, 64};
  Index embedding_dim = 16;
  int ae_epochs = 20;
  int pretrain_epochs = 10;
  int kmeans_restarts = 10;

  train::FitConfig fit{1e-3, 128, 10, 1};
  double finetune_factor = 0.1;

  double beta = mask::kDefaultBeta;
  mode::Strategy strategy = mode::Strategy::full;

  data::SynthConfig synth;
  int synth_test_utts = 10;

  std::filesystem::path resolve(const std::filesystem::path& p) const { return p.is_absolute() ? p : home / p; }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || ptr != end)
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  if (trim(v).empty()) return out;
  for (const auto& item : split(v, ',')) out.push_back(parse_number<T>(key, item));
  return out;
}

// Shortest text that parses back to the same value.
template <class T>
std::string format_number(T v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
std::string format_list(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + format_number(xs[i]);
  return out;
}

struct Binding {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  bool hashed = true;  // part of the configuration fingerprint
};

template <class T, class Access>
Binding number(std::string key, Access access, bool hashed = true) {
  return {key, [access](const RunConfig& c) { return format_number(access(c)); },
          [access, key](RunConfig& c, const std::string& v) { access(c) = parse_number<T>(key, v); }, hashed};
}

template <class T, class Access>
Binding list(std::string key, Access access) {
  return {key, [access](const RunConfig& c) { return format_list(access(c)); },
          [access, key](RunConfig& c, const std::string& v) { access(c) = parse_list<T>(key, v); }};
}

template <class Access>
Binding path(std::string key, Access access) {
  return {key, [access](const RunConfig& c) { return access(c).string(); },
          [access](RunConfig& c, const std::string& v) { access(c) = v; }, false};
}

inline const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      path("paths.clean", [](auto& c) -> auto& { return c.paths.clean; }),
      path("paths.noise", [](auto& c) -> auto& { return c.paths.noise; }),
      path("paths.test_clean", [](auto& c) -> auto& { return c.paths.test_clean; }),
      path("paths.data", [](auto& c) -> auto& { return c.paths.data; }),
      path("paths.models", [](auto& c) -> auto& { return c.paths.models; }),
      path("paths.reports", [](auto& c) -> auto& { return c.paths.reports; }),

      number<int>("stft.frame_len", [](auto& c) -> auto& { return c.features.stft.frame_len; }),
      number<int>("stft.hop", [](auto& c) -> auto& { return c.features.stft.hop; }),
      number<double>("stft.magnitude_floor", [](auto& c) -> auto& { return c.features.stft.magnitude_floor; }),
      number<int>("stft.n_mels", [](auto& c) -> auto& { return c.features.stft.n_mels; }),
      number<int>("stft.n_mfcc", [](auto& c) -> auto& { return c.features.stft.n_mfcc; }),
      number<int>("stft.sample_rate", [](auto& c) -> auto& { return c.features.stft.sample_rate; }),
      number<int>("features.context", [](auto& c) -> auto& { return c.features.context; }),
      number<double>("features.gamma", [](auto& c) -> auto& { return c.features.gamma; }),

      list<double>("data.train_snrs", [](auto& c) -> auto& { return c.train_snrs; }),
      list<double>("data.test_snrs", [](auto& c) -> auto& { return c.test_snrs; }),
      number<double>("data.train_fraction", [](auto& c) -> auto& { return c.train_fraction; }),
      number<std::uint64_t>("data.seed", [](auto& c) -> auto& { return c.data_seed; }),

      number<int>("model.experts", [](auto& c) -> auto& { return c.num_experts; }),
      list<Index>("model.expert_hidden", [](auto& c) -> auto& { return c.expert_hidden; }),
      list<Index>("model.gate_hidden", [](auto& c) -> auto& { return c.gate_hidden; }),
      {"model.batchnorm", [](const RunConfig& c) { return std::string(c.batchnorm ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.batchnorm = parse_bool("model.batchnorm", v); }},

      list<Index>("pretrain.ae_hidden", [](auto& c) -> auto& { return c.ae_hidden; }),
      number<Index>("pretrain.embedding_dim", [](auto& c) -> auto& { return c.embedding_dim; }),
      number<int>("pretrain.ae_epochs", [](auto& c) -> auto& { return c.ae_epochs; }),
      number<int>("pretrain.epochs", [](auto& c) -> auto& { return c.pretrain_epochs; }),
      number<int>("pretrain.kmeans_restarts", [](auto& c) -> auto& { return c.kmeans_restarts; }),

      number<double>("train.lr", [](auto& c) -> auto& { return c.fit.lr; }),
      number<Index>("train.batch", [](auto& c) -> auto& { return c.fit.batch_size; }),
      number<int>("train.epochs", [](auto& c) -> auto& { return c.fit.epochs; }),
      number<std::uint64_t>("train.seed", [](auto& c) -> auto& { return c.fit.seed; }),
      number<double>("train.finetune_factor", [](auto& c) -> auto& { return c.finetune_factor; }),

      number<double>("enhance.beta", [](auto& c) -> auto& { return c.beta; }),
      {"enhance.strategy", [](const RunConfig& c) { return mode::to_string(c.strategy); },
       [](RunConfig& c, const std::string& v) { c.strategy = mode::parse_strategy(v); }},

      number<int>("synth.utts", [](auto& c) -> auto& { return c.synth.num_utts; }),
      number<int>("synth.test_utts", [](auto& c) -> auto& { return c.synth_test_utts; }),
      number<double>("synth.seconds", [](auto& c) -> auto& { return c.synth.seconds; }),
      number<int>("synth.noises", [](auto& c) -> auto& { return c.synth.num_noises; }),
      number<std::uint64_t>("synth.seed", [](auto& c) -> auto& { return c.synth.seed; }),
  };
  return table;
}

}  // namespace detail

inline std::vector<std::string> keys() {
  std::vector<std::string> out;
  for (const auto& b : detail::bindings()) out.push_back(b.key);
  return out;
}

inline void set(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& b : detail::bindings())
    if (b.key == key) {
      b.set(c, detail::trim(value));
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get(const RunConfig& c, const std::string& key) {
  for (const auto& b : detail::bindings())
    if (b.key == key) return b.get(c);
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies "key=value".
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set(c, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void load_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_override(c, line);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

/// Every key as "key = value", one per line, in table order.
inline std::string dump(const RunConfig& c, bool hashed_only = false) {
  std::ostringstream os;
  for (const auto& b : detail::bindings())
    if (!hashed_only || b.hashed) os << b.key << " = " << b.get(c) << "\n";
  return os.str();
}

/// Fingerprint of everything except paths.
inline std::uint64_t config_hash(const RunConfig& c) { return io::fnv1a(dump(c, true)); }

inline void validate(const RunConfig& c) {
  using mdse::detail::require;
  data::validate(c.features);
  train::validate(c.fit);
  require<ConfigError>(c.num_experts >= 1, "model.experts must be >= 1");
  require<ConfigError>(!c.train_snrs.empty(), "data.train_snrs must not be empty");
  require<ConfigError>(!c.test_snrs.empty(), "data.test_snrs must not be empty");
  require<ConfigError>(c.train_fraction > 0.0 && c.train_fraction < 1.0, "data.train_fraction must be in (0, 1)");
  require<ConfigError>(c.embedding_dim >= 1, "pretrain.embedding_dim must be >= 1");
  require<ConfigError>(c.ae_epochs >= 0 && c.pretrain_epochs >= 0, "pretrain epochs must be >= 0");
  require<ConfigError>(c.kmeans_restarts >= 1, "pretrain.kmeans_restarts must be >= 1");
  require<ConfigError>(c.finetune_factor > 0.0, "train.finetune_factor must be positive");
  require<ConfigError>(c.beta > 0.0, "enhance.beta must be positive");
  require<ConfigError>(c.synth.num_utts >= 1 && c.synth_test_utts >= 1 && c.synth.num_noises >= 1,
                       "synth counts must be >= 1");
  require<ConfigError>(c.synth.seconds > 0.0, "synth.seconds must be positive");
  for (auto h : c.expert_hidden) require<ConfigError>(h > 0, "model.expert_hidden widths must be positive");
  for (auto h : c.gate_hidden) require<ConfigError>(h > 0, "model.gate_hidden widths must be positive");
  for (auto h : c.ae_hidden) require<ConfigError>(h > 0, "pretrain.ae_hidden widths must be positive");
}

/// Defaults, then $MDSE_HOME, then the file (if any), then overrides.
inline RunConfig make(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                      const std::filesystem::path& home = {}) {
  RunConfig c;
  if (const char* env = std::getenv("MDSE_HOME"); env && *env) c.home = env;
  if (!home.empty()) c.home = home;
  if (!file.empty()) load_file(c, file);
  for (const auto& o : overrides) apply_override(c, o);
  c.synth.sample_rate = c.features.stft.sample_rate;
  c.synth.frame_len = c.features.stft.frame_len;
  c.synth.hop = c.features.stft.hop;
  validate(c);
  return c;
}

inline mode::Architecture architecture(const RunConfig& c) {
  mode::Architecture a;
  a.expert_input_dim = c.features.expert_input_dim();
  a.gate_input_dim = c.features.gate_input_dim();
  a.mask_dim = c.features.mask_dim();
  a.num_experts = c.num_experts;
  a.expert_hidden = c.expert_hidden;
  a.gate_hidden = c.gate_hidden;
  a.batchnorm = c.batchnorm;
  a.context = c.features.context;
  a.feature_hash = data::feature_hash(c.features);
  return a;
}

}  // namespace mdse::config
