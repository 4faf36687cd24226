#pragma once

// Run configuration: a flat TOML subset ([section] headers, key = value with
// strings, integers, reals and booleans) plus `section.key=value` overrides.

#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mvdiag/alerts.hpp"
#include "mvdiag/augment.hpp"
#include "mvdiag/dataset.hpp"
#include "mvdiag/model.hpp"
#include "mvdiag/simgen.hpp"
#include "mvdiag/train.hpp"

namespace mvdiag {

struct Config {
  std::uint64_t seed = 7;
  EmbeddingConfig embedding;
  ModelConfig model;
  AugmentConfig augment;
  bool augment_enabled = true;
  ExtractorConfig extractors;
  TrainConfig train;
  double test_fraction = 0.2;
  std::int64_t alert_window_ms = 5 * 60'000;
  ScenarioConfig scenario;
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside a quoted string.
inline std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

inline std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
  std::string v = unquote(raw);
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      out = static_cast<T>(std::stod(v, &used));
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidConfig, key + ": expected a number, got '" + raw + "'");
    }
  } else {
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size())
      throw Error(ErrorCode::InvalidConfig, key + ": expected an integer, got '" + raw + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& raw) {
  std::string v = unquote(raw);
  if (v == "true") return true;
  if (v == "false") return false;
  throw Error(ErrorCode::InvalidConfig, key + ": expected true or false, got '" + raw + "'");
}

}  // namespace detail

using ConfigSetter = std::function<void(Config&, const std::string& key, const std::string& raw)>;

inline const std::map<std::string, ConfigSetter>& config_keys() {
  using detail::parse_bool;
  using detail::parse_number;
  static const std::map<std::string, ConfigSetter> keys{
      {"seed", [](Config& c, auto& k, auto& v) { c.seed = parse_number<std::uint64_t>(k, v); }},
      {"embedding.dimension", [](Config& c, auto& k, auto& v) { c.embedding.dimension = parse_number<int>(k, v); }},
      {"embedding.window", [](Config& c, auto& k, auto& v) { c.embedding.window = parse_number<int>(k, v); }},
      {"embedding.negatives", [](Config& c, auto& k, auto& v) { c.embedding.negatives = parse_number<int>(k, v); }},
      {"embedding.epochs", [](Config& c, auto& k, auto& v) { c.embedding.epochs = parse_number<int>(k, v); }},
      {"embedding.learning_rate", [](Config& c, auto& k, auto& v) { c.embedding.learning_rate = parse_number<double>(k, v); }},
      {"model.hidden_dim", [](Config& c, auto& k, auto& v) { c.model.hidden_dim = parse_number<int>(k, v); }},
      {"model.output_dim", [](Config& c, auto& k, auto& v) { c.model.output_dim = parse_number<int>(k, v); }},
      {"model.layers", [](Config& c, auto& k, auto& v) { c.model.layers = parse_number<int>(k, v); }},
      {"model.head_hidden", [](Config& c, auto& k, auto& v) { c.model.head_hidden = parse_number<int>(k, v); }},
      {"model.aggregator", [](Config& c, auto&, auto& v) { c.model.aggregator = parse_aggregator(detail::unquote(v)); }},
      {"model.tau", [](Config& c, auto& k, auto& v) { c.model.tau = parse_number<double>(k, v); }},
      {"model.omega", [](Config& c, auto& k, auto& v) { c.model.omega = parse_number<double>(k, v); }},
      {"model.task_oriented", [](Config& c, auto& k, auto& v) { c.model.use_task_oriented = parse_bool(k, v); }},
      {"model.cross_modal", [](Config& c, auto& k, auto& v) { c.model.use_cross_modal = parse_bool(k, v); }},
      {"augment.enabled", [](Config& c, auto& k, auto& v) { c.augment_enabled = parse_bool(k, v); }},
      {"augment.probability", [](Config& c, auto& k, auto& v) { c.augment.inactivation_probability = parse_number<double>(k, v); }},
      {"augment.copies", [](Config& c, auto& k, auto& v) { c.augment.copies_per_sample = parse_number<int>(k, v); }},
      {"logs.low_frequency_fraction", [](Config& c, auto& k, auto& v) { c.extractors.log.low_freq_fraction = parse_number<double>(k, v); }},
      {"logs.depth", [](Config& c, auto& k, auto& v) { c.extractors.drain.tree_depth = parse_number<int>(k, v); }},
      {"logs.similarity", [](Config& c, auto& k, auto& v) { c.extractors.drain.similarity_threshold = parse_number<double>(k, v); }},
      {"logs.max_children", [](Config& c, auto& k, auto& v) { c.extractors.drain.max_children = parse_number<int>(k, v); }},
      {"traces.trees", [](Config& c, auto& k, auto& v) { c.extractors.trace.tree_count = parse_number<int>(k, v); }},
      {"traces.subsample", [](Config& c, auto& k, auto& v) { c.extractors.trace.subsample_size = parse_number<int>(k, v); }},
      {"traces.threshold", [](Config& c, auto& k, auto& v) { c.extractors.trace.score_threshold = parse_number<double>(k, v); }},
      {"metrics.sigma_floor", [](Config& c, auto& k, auto& v) { c.extractors.sigma_floor = parse_number<double>(k, v); }},
      {"train.learning_rate", [](Config& c, auto& k, auto& v) { c.train.learning_rate = parse_number<double>(k, v); }},
      {"train.weight_decay", [](Config& c, auto& k, auto& v) { c.train.weight_decay = parse_number<double>(k, v); }},
      {"train.batch_size", [](Config& c, auto& k, auto& v) { c.train.batch_size = parse_number<int>(k, v); }},
      {"train.max_epochs", [](Config& c, auto& k, auto& v) { c.train.max_epochs = parse_number<int>(k, v); }},
      {"train.patience", [](Config& c, auto& k, auto& v) { c.train.patience = parse_number<int>(k, v); }},
      {"train.min_delta", [](Config& c, auto& k, auto& v) { c.train.min_delta = parse_number<double>(k, v); }},
      {"split.test_fraction", [](Config& c, auto& k, auto& v) { c.test_fraction = parse_number<double>(k, v); }},
      {"split.alert_window_ms", [](Config& c, auto& k, auto& v) { c.alert_window_ms = parse_number<std::int64_t>(k, v); }},
      {"simulate.rps", [](Config& c, auto& k, auto& v) { c.scenario.rps = parse_number<double>(k, v); }},
      {"simulate.faults_per_type", [](Config& c, auto& k, auto& v) { c.scenario.faults_per_type = parse_number<int>(k, v); }},
      {"simulate.clean_ms", [](Config& c, auto& k, auto& v) { c.scenario.clean_ms = parse_number<std::int64_t>(k, v); }},
      {"simulate.fault_interval_ms", [](Config& c, auto& k, auto& v) { c.scenario.fault_interval_ms = parse_number<std::int64_t>(k, v); }},
      {"simulate.fault_duration_ms", [](Config& c, auto& k, auto& v) { c.scenario.fault_duration_ms = parse_number<std::int64_t>(k, v); }},
      {"simulate.severity_min", [](Config& c, auto& k, auto& v) { c.scenario.severity_min = parse_number<double>(k, v); }},
      {"simulate.severity_max", [](Config& c, auto& k, auto& v) { c.scenario.severity_max = parse_number<double>(k, v); }},
  };
  return keys;
}

inline void set_config_value(Config& c, const std::string& key, const std::string& raw) {
  auto it = config_keys().find(key);
  if (it == config_keys().end()) throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  it->second(c, key, detail::trim(raw));
}

/// Seeds of the sub-components follow from the root seed.
inline void propagate_seed(Config& c) {
  c.augment.seed = derive_seed(c.seed, "augment");
  c.extractors.trace.seed = derive_seed(c.seed, "iforest");
  c.scenario.seed = derive_seed(c.seed, "simulate");
}

inline void validate(const Config& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::InvalidConfig, what);
  };
  require(c.embedding.dimension >= 1 && c.embedding.window >= 1 && c.embedding.negatives >= 1 && c.embedding.epochs >= 1,
          "embedding sizes must be positive");
  require(c.embedding.learning_rate > 0.0, "embedding.learning_rate must be positive");
  ModelConfig m = c.model;
  m.input_dim = c.embedding.dimension;
  m.validate();
  require(c.augment.inactivation_probability >= 0.0 && c.augment.inactivation_probability < 1.0,
          "augment.probability must be in [0,1)");
  require(c.augment.copies_per_sample >= 0, "augment.copies must be non-negative");
  require(c.extractors.log.low_freq_fraction >= 0.0 && c.extractors.log.low_freq_fraction <= 1.0,
          "logs.low_frequency_fraction must be in [0,1]");
  require(c.extractors.drain.tree_depth >= 3, "logs.depth must be at least 3");
  require(c.extractors.drain.similarity_threshold > 0.0 && c.extractors.drain.similarity_threshold <= 1.0,
          "logs.similarity must be in (0,1]");
  require(c.extractors.drain.max_children >= 1, "logs.max_children must be positive");
  require(c.extractors.trace.tree_count >= 1 && c.extractors.trace.subsample_size >= 2, "traces.trees/subsample too small");
  require(c.extractors.trace.score_threshold > 0.0 && c.extractors.trace.score_threshold < 1.0, "traces.threshold must be in (0,1)");
  require(c.extractors.sigma_floor > 0.0, "metrics.sigma_floor must be positive");
  require(c.train.learning_rate > 0.0 && c.train.weight_decay >= 0.0, "train rates out of range");
  require(c.train.batch_size >= 1 && c.train.max_epochs >= 1 && c.train.patience >= 1, "train sizes must be positive");
  require(c.test_fraction > 0.0 && c.test_fraction < 1.0, "split.test_fraction must be in (0,1)");
  require(c.alert_window_ms > 0, "split.alert_window_ms must be positive");
  require(c.scenario.rps > 0.0 && c.scenario.faults_per_type >= 0, "simulate rates out of range");
  require(c.scenario.fault_duration_ms > 0 && c.scenario.fault_interval_ms >= c.scenario.fault_duration_ms,
          "fault duration must be positive and fit the interval");
  require(c.scenario.severity_min > 0.0 && c.scenario.severity_min <= c.scenario.severity_max &&
              c.scenario.severity_max <= 1.0,
          "severity range must lie in (0,1]");
}

inline Config parse_config(std::istream& in, const std::string& origin = "<config>") {
  Config c;
  std::string section;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::string text = detail::trim(detail::strip_comment(line));
    if (text.empty()) continue;
    auto where = origin + ":" + std::to_string(number);
    if (text.front() == '[') {
      if (text.back() != ']') throw Error(ErrorCode::InvalidConfig, where + ": unterminated section header", number);
      section = detail::trim(text.substr(1, text.size() - 2));
      continue;
    }
    auto eq = text.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::InvalidConfig, where + ": expected key = value", number);
    std::string key = detail::trim(text.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    try {
      set_config_value(c, key, text.substr(eq + 1));
    } catch (const Error& e) {
      throw Error(ErrorCode::InvalidConfig, where + ": " + e.what(), number);
    }
  }
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open config " + path);
  return parse_config(in, path);
}

/// Applies `key=value` overrides, propagates the root seed, validates.
inline Config finalize_config(Config c, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    auto eq = o.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::InvalidConfig, "override '" + o + "' is not key=value");
    set_config_value(c, detail::trim(o.substr(0, eq)), o.substr(eq + 1));
  }
  propagate_seed(c);
  validate(c);
  return c;
}

inline ModelConfig model_config(const Config& c, int classes) {
  ModelConfig m = c.model;
  m.input_dim = c.embedding.dimension;
  m.classes = classes;
  return m;
}

}  // namespace mvdiag
