#pragma once

// Unified alerts (metric 3-sigma, trace IForest/status, log Rule 1 + Rule 2)
// and the bundle of fitted extractors that produces them.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mvdiag/common.hpp"
#include "mvdiag/iforest.hpp"
#include "mvdiag/logparse.hpp"
#include "mvdiag/telemetry.hpp"

namespace mvdiag {

enum class Modality { Metric = 0, Trace = 1, Log = 2 };
inline constexpr std::array<Modality, 3> kModalities{Modality::Metric, Modality::Trace, Modality::Log};

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::Metric: return "metric";
    case Modality::Trace: return "trace";
    case Modality::Log: return "log";
  }
  return "?";
}

enum class Direction { Up, Down };

struct MetricPayload {
  std::string metric_name;
  Direction direction = Direction::Up;
  auto operator<=>(const MetricPayload&) const = default;
};

struct TracePayload {
  std::string parent_id;
  std::string operation;
  std::string abnormal_type;  // status code or "PD"
  auto operator<=>(const TracePayload&) const = default;
};

struct LogPayload {
  int log_key = 0;
  auto operator<=>(const LogPayload&) const = default;
};

inline constexpr std::string_view kPerformanceDegradation = "PD";

struct Alert {
  std::string reporter_id;
  std::variant<MetricPayload, TracePayload, LogPayload> payload;

  Modality modality() const { return static_cast<Modality>(payload.index()); }
  auto operator<=>(const Alert&) const = default;
};

inline void to_json(json& j, const Alert& a) {
  j = json{{"reporter", a.reporter_id}, {"modality", std::string(to_string(a.modality()))}};
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, MetricPayload>) {
          j["metric"] = p.metric_name;
          j["direction"] = p.direction == Direction::Up ? "up" : "down";
        } else if constexpr (std::is_same_v<P, TracePayload>) {
          j["parent"] = p.parent_id;
          j["operation"] = p.operation;
          j["abnormal"] = p.abnormal_type;
        } else {
          j["log_key"] = p.log_key;
        }
      },
      a.payload);
}

inline void from_json(const json& j, Alert& a) {
  a.reporter_id = detail::require_string(j, "reporter");
  auto modality = detail::require_string(j, "modality");
  if (modality == "metric") {
    auto dir = detail::require_string(j, "direction");
    if (dir != "up" && dir != "down") throw std::invalid_argument("direction must be up or down");
    a.payload = MetricPayload{detail::require_string(j, "metric"), dir == "up" ? Direction::Up : Direction::Down};
  } else if (modality == "trace") {
    a.payload = TracePayload{detail::require_string(j, "parent"), detail::require_string(j, "operation"),
                             detail::require_string(j, "abnormal")};
  } else if (modality == "log") {
    a.payload = LogPayload{static_cast<int>(detail::require_int(j, "log_key"))};
  } else {
    throw std::invalid_argument("unknown modality '" + modality + "'");
  }
}

// ---------------------------------------------------------------------------
// Metrics: per-series 3-sigma

struct SeriesStats {
  double mean = 0.0;
  double std = 0.0;  // population
  std::int64_t count = 0;
};

using SeriesKey = std::pair<std::string, std::string>;  // (instance, metric)

struct MetricBaseline {
  std::map<SeriesKey, SeriesStats> series;
  double sigma_floor = 1e-8;
  double sigma_multiplier = 3.0;
};

/// Welford mean and population std per (instance, metric). Series with fewer
/// than two samples are skipped and reported as InsufficientData.
inline MetricBaseline fit_metric_baseline(const std::vector<MetricSample>& training, Issues* issues = nullptr) {
  struct Acc {
    std::int64_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;
  };
  std::map<SeriesKey, Acc> acc;
  for (const auto& s : training) {
    auto& a = acc[{s.instance_id, s.metric_name}];
    ++a.n;
    double delta = s.value - a.mean;
    a.mean += delta / static_cast<double>(a.n);
    a.m2 += delta * (s.value - a.mean);
  }
  MetricBaseline baseline;
  for (const auto& [key, a] : acc) {
    if (a.n < 2) {
      report(issues, ErrorCode::InsufficientData, key.first + "/" + key.second);
      continue;
    }
    baseline.series[key] = {a.mean, std::sqrt(std::max(0.0, a.m2 / static_cast<double>(a.n))), a.n};
  }
  return baseline;
}

/// At most one alert per (instance, metric, direction), in series order with
/// "up" before "down".
inline std::vector<Alert> detect_metric_alerts(const std::vector<MetricSample>& window, const MetricBaseline& baseline,
                                               Issues* issues = nullptr) {
  std::map<SeriesKey, std::pair<bool, bool>> hits;
  std::set<SeriesKey> unknown;
  for (const auto& s : window) {
    SeriesKey key{s.instance_id, s.metric_name};
    auto it = baseline.series.find(key);
    if (it == baseline.series.end()) {
      unknown.insert(key);
      continue;
    }
    double sigma = std::max(it->second.std, baseline.sigma_floor) * baseline.sigma_multiplier;
    auto& hit = hits[key];
    if (s.value > it->second.mean + sigma) hit.first = true;
    if (s.value < it->second.mean - sigma) hit.second = true;
  }
  for (const auto& key : unknown) report(issues, ErrorCode::UnknownSeries, key.first + "/" + key.second);
  std::vector<Alert> out;
  for (const auto& [key, hit] : hits) {
    if (hit.first) out.push_back({key.first, MetricPayload{key.second, Direction::Up}});
    if (hit.second) out.push_back({key.first, MetricPayload{key.second, Direction::Down}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Traces: IForest per invocation pair

struct TraceDetectorConfig {
  int tree_count = 100;
  int subsample_size = 256;
  double score_threshold = 0.6;
  std::set<std::string> success_codes{"200", "0", "OK"};
  std::uint64_t seed = 0;
};

using PairKey = std::tuple<std::string, std::string, std::string>;  // (caller, callee, operation)
using TracePoint = std::array<double, 2>;                            // (duration_ms, status_ok)

class TraceDetector {
 public:
  TraceDetector() = default;

  /// One forest per (caller, callee, operation) group, seeded from the group
  /// key so that adding a group never reshuffles another.
  TraceDetector(const std::vector<Span>& training_spans, TraceDetectorConfig cfg) : cfg_(std::move(cfg)) {
    std::map<PairKey, std::vector<TracePoint>> groups;
    for (const auto& inv : extract_invocations(training_spans)) {
      groups[{inv.caller_instance, inv.callee_instance, inv.operation}].push_back(point(inv));
    }
    if (groups.empty()) throw Error(ErrorCode::NoInvocationPairs, "no parented spans in the training window");
    for (auto& [key, points] : groups) add_group(key, std::move(points));
    fit_global();
  }

  const TraceDetectorConfig& config() const { return cfg_; }
  bool has_pair(const PairKey& key) const { return forests_.count(key) > 0; }
  std::size_t pair_count() const { return forests_.size(); }

  /// Anomaly score of one invocation; nullopt for pairs not seen in training.
  std::optional<double> score(const PairKey& key, const TracePoint& p) const {
    auto it = forests_.find(key);
    if (it == forests_.end()) return std::nullopt;
    return it->second.score(p);
  }

  bool is_success(const std::string& status) const { return cfg_.success_codes.count(status) > 0; }

  std::vector<Alert> detect(const std::vector<Span>& window_spans, Issues* issues = nullptr) const {
    std::set<Alert> out;
    std::set<PairKey> unknown;
    for (const auto& inv : extract_invocations(window_spans)) {
      PairKey key{inv.caller_instance, inv.callee_instance, inv.operation};
      if (!is_success(inv.status_code)) {
        out.insert({inv.callee_instance, TracePayload{inv.caller_instance, inv.operation, inv.status_code}});
        continue;
      }
      bool degraded = false;
      if (auto s = score(key, point(inv))) {
        degraded = *s > cfg_.score_threshold;
      } else {
        unknown.insert(key);
        degraded = static_cast<double>(inv.duration) > global_mean_ + 3.0 * std::max(global_std_, 1e-8);
      }
      if (degraded) {
        out.insert({inv.callee_instance,
                    TracePayload{inv.caller_instance, inv.operation, std::string(kPerformanceDegradation)}});
      }
    }
    for (const auto& [c, p, o] : unknown) report(issues, ErrorCode::UnknownPair, c + "->" + p + " " + o);
    return {out.begin(), out.end()};
  }

  /// Stores each group's training points; the forests are refit from them
  /// and the recorded seed on load, which reproduces them exactly.
  json to_json() const {
    json groups = json::array();
    for (const auto& [key, points] : points_) {
      json pts = json::array();
      for (const auto& p : points) pts.push_back({p[0], p[1]});
      groups.push_back({{"caller", std::get<0>(key)},
                        {"callee", std::get<1>(key)},
                        {"operation", std::get<2>(key)},
                        {"points", pts}});
    }
    return {{"tree_count", cfg_.tree_count},
            {"subsample_size", cfg_.subsample_size},
            {"score_threshold", cfg_.score_threshold},
            {"success_codes", cfg_.success_codes},
            {"seed", cfg_.seed},
            {"groups", groups}};
  }

  static TraceDetector from_json(const json& j) {
    TraceDetector d;
    d.cfg_.tree_count = j.at("tree_count").get<int>();
    d.cfg_.subsample_size = j.at("subsample_size").get<int>();
    d.cfg_.score_threshold = j.at("score_threshold").get<double>();
    d.cfg_.success_codes = j.at("success_codes").get<std::set<std::string>>();
    d.cfg_.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& g : j.at("groups")) {
      std::vector<TracePoint> points;
      for (const auto& p : g.at("points")) points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      d.add_group({g.at("caller").get<std::string>(), g.at("callee").get<std::string>(),
                   g.at("operation").get<std::string>()},
                  std::move(points));
    }
    d.fit_global();
    return d;
  }

 private:
  TracePoint point(const Invocation& inv) const {
    return {static_cast<double>(inv.duration), is_success(inv.status_code) ? 1.0 : 0.0};
  }

  void add_group(const PairKey& key, std::vector<TracePoint> points) {
    auto [c, p, o] = key;
    Rng rng(derive_seed(cfg_.seed, "iforest|" + c + "|" + p + "|" + o));
    forests_.emplace(key, IsolationForest<2>(points, cfg_.tree_count, cfg_.subsample_size, rng));
    points_.emplace(key, std::move(points));
  }

  void fit_global() {
    double n = 0.0, sum = 0.0, sq = 0.0;
    for (const auto& [key, points] : points_) {
      for (const auto& p : points) {
        n += 1.0;
        sum += p[0];
        sq += p[0] * p[0];
      }
    }
    global_mean_ = n > 0 ? sum / n : 0.0;
    global_std_ = n > 0 ? std::sqrt(std::max(0.0, sq / n - global_mean_ * global_mean_)) : 0.0;
  }

  TraceDetectorConfig cfg_;
  std::map<PairKey, IsolationForest<2>> forests_;
  std::map<PairKey, std::vector<TracePoint>> points_;
  double global_mean_ = 0.0;
  double global_std_ = 0.0;
};

inline TraceDetector fit_trace_detector(const std::vector<Span>& training_spans, TraceDetectorConfig cfg = {}) {
  return TraceDetector(training_spans, std::move(cfg));
}

inline std::vector<Alert> detect_trace_alerts(const std::vector<Span>& window_spans, const TraceDetector& model,
                                              Issues* issues = nullptr) {
  return model.detect(window_spans, issues);
}

// ---------------------------------------------------------------------------
// Logs: Rule 1 (ERROR) and Rule 2 (rare)

inline std::set<std::string> default_error_keywords() {
  return {"ERROR", "Error", "error", "Exception", "exception", "fail", "failed", "FATAL"};
}

struct LogAlertConfig {
  double low_freq_fraction = 0.5;
  std::set<std::string> error_keywords = default_error_keywords();
};

struct LogAlertSet {
  std::set<int> alert_keys;
  std::set<std::string> error_keywords = default_error_keywords();
  double low_freq_fraction = 0.5;
};

inline bool mentions_error(const std::string& text, const std::set<std::string>& keywords) {
  return std::any_of(keywords.begin(), keywords.end(),
                     [&](const std::string& k) { return text.find(k) != std::string::npos; });
}

/// Rule 1: templates seen at ERROR level or whose text contains an error
/// keyword. Rule 2: the ceil(k * |templates|) least frequent templates, ties
/// by id.
inline LogAlertSet select_log_alert_keys(const std::map<int, std::int64_t>& freq,
                                         const std::vector<LogTemplate>& templates,
                                         const std::set<int>& error_level_ids, const LogAlertConfig& cfg = {}) {
  if (freq.empty()) throw Error(ErrorCode::EmptyState, "empty frequency table");
  if (!(cfg.low_freq_fraction > 0.0 && cfg.low_freq_fraction <= 1.0))
    throw Error(ErrorCode::InvalidConfig, "low_freq_fraction must be in (0,1]");
  LogAlertSet set{{}, cfg.error_keywords, cfg.low_freq_fraction};
  for (const auto& t : templates) {
    if (error_level_ids.count(t.id) || mentions_error(t.text(), cfg.error_keywords)) set.alert_keys.insert(t.id);
  }
  std::vector<std::pair<std::int64_t, int>> by_count;
  for (const auto& t : templates) {
    auto it = freq.find(t.id);
    by_count.emplace_back(it == freq.end() ? 0 : it->second, t.id);
  }
  std::sort(by_count.begin(), by_count.end());
  auto take = static_cast<std::size_t>(
      std::ceil(cfg.low_freq_fraction * static_cast<double>(templates.size()) - 1e-9));
  for (std::size_t i = 0; i < take && i < by_count.size(); ++i) set.alert_keys.insert(by_count[i].second);
  return set;
}

/// One alert per distinct (instance, key) with key in the alert set. Uses the
/// read-only template lookup so the parser is never mutated at detection time.
inline std::vector<Alert> detect_log_alerts(const std::vector<LogEntry>& window_logs, const DrainParser& parser,
                                            const LogAlertSet& set) {
  std::set<std::pair<std::string, int>> seen;
  for (const auto& log : window_logs) {
    auto key = parser.match(log.message);
    if (key && set.alert_keys.count(*key)) seen.emplace(log.instance_id, *key);
  }
  std::vector<Alert> out;
  for (const auto& [instance, key] : seen) out.push_back({instance, LogPayload{key}});
  return out;
}

// ---------------------------------------------------------------------------
// Fitted extractor bundle

struct ExtractorConfig {
  TraceDetectorConfig trace;
  DrainConfig drain;
  LogAlertConfig log;
  double sigma_floor = 1e-8;
};

class ExtractorBundle {
 public:
  ExtractorBundle() = default;

  /// Metric baselines and trace forests come from the clean training window;
  /// the Drain tree and log frequencies from `log_history`.
  static ExtractorBundle fit(const TelemetryBundle& training_window, const std::vector<LogEntry>& log_history,
                             ExtractorConfig cfg, Issues* issues = nullptr) {
    ExtractorBundle b;
    b.cfg_ = std::move(cfg);
    b.baseline_ = fit_metric_baseline(training_window.metrics, issues);
    b.baseline_.sigma_floor = b.cfg_.sigma_floor;
    b.trace_ = fit_trace_detector(training_window.spans, b.cfg_.trace);
    b.drain_ = DrainParser(b.cfg_.drain);
    std::set<int> error_ids;
    for (const auto& log : log_history) {
      int id = b.drain_.parse(log.message);
      if (log.level.kind == LogLevel::Error) error_ids.insert(id);
    }
    b.error_level_ids_ = error_ids;
    if (b.drain_.parsed_count() == 0) {
      report(issues, ErrorCode::EmptyState, "no log history; log alerts disabled");
    } else {
      b.log_set_ = select_log_alert_keys(b.drain_.frequency_table(), b.drain_.templates(), error_ids, b.cfg_.log);
    }
    return b;
  }

  std::vector<Alert> extract(const TelemetryBundle& window, Issues* issues = nullptr) const {
    auto out = detect_metric_alerts(window.metrics, baseline_, issues);
    auto traces = trace_.detect(window.spans, issues);
    auto logs = detect_log_alerts(window.logs, drain_, log_set_);
    out.insert(out.end(), traces.begin(), traces.end());
    out.insert(out.end(), logs.begin(), logs.end());
    return out;
  }

  const MetricBaseline& baseline() const { return baseline_; }
  const TraceDetector& trace_detector() const { return trace_; }
  const DrainParser& drain() const { return drain_; }
  const LogAlertSet& log_alert_set() const { return log_set_; }
  const ExtractorConfig& config() const { return cfg_; }

  json to_json() const {
    json series = json::array();
    for (const auto& [key, s] : baseline_.series) {
      series.push_back({{"instance", key.first}, {"metric", key.second}, {"mean", s.mean}, {"std", s.std},
                        {"count", s.count}});
    }
    return {{"version", 1},
            {"seed", cfg_.trace.seed},
            {"metric", {{"sigma_floor", baseline_.sigma_floor}, {"series", series}}},
            {"trace", trace_.to_json()},
            {"drain",
             {{"tree_depth", cfg_.drain.tree_depth},
              {"similarity_threshold", cfg_.drain.similarity_threshold},
              {"max_children", cfg_.drain.max_children},
              {"templates", drain_.to_json()}}},
            {"log",
             {{"low_freq_fraction", log_set_.low_freq_fraction},
              {"error_keywords", log_set_.error_keywords},
              {"error_level_ids", error_level_ids_},
              {"alert_keys", log_set_.alert_keys}}}};
  }

  static ExtractorBundle from_json(const json& j) {
    if (j.at("version").get<int>() != 1) throw Error(ErrorCode::MalformedRecord, "unsupported extractor version");
    ExtractorBundle b;
    b.baseline_.sigma_floor = j.at("metric").at("sigma_floor").get<double>();
    b.cfg_.sigma_floor = b.baseline_.sigma_floor;
    for (const auto& s : j.at("metric").at("series")) {
      b.baseline_.series[{s.at("instance").get<std::string>(), s.at("metric").get<std::string>()}] = {
          s.at("mean").get<double>(), s.at("std").get<double>(), s.at("count").get<std::int64_t>()};
    }
    b.trace_ = TraceDetector::from_json(j.at("trace"));
    b.cfg_.trace = b.trace_.config();
    const auto& d = j.at("drain");
    b.cfg_.drain.tree_depth = d.at("tree_depth").get<int>();
    b.cfg_.drain.similarity_threshold = d.at("similarity_threshold").get<double>();
    b.cfg_.drain.max_children = d.at("max_children").get<int>();
    b.drain_ = DrainParser::from_json(d.at("templates"), b.cfg_.drain);
    const auto& l = j.at("log");
    b.log_set_.low_freq_fraction = l.at("low_freq_fraction").get<double>();
    b.log_set_.error_keywords = l.at("error_keywords").get<std::set<std::string>>();
    b.log_set_.alert_keys = l.at("alert_keys").get<std::set<int>>();
    b.error_level_ids_ = l.at("error_level_ids").get<std::set<int>>();
    b.cfg_.log = {b.log_set_.low_freq_fraction, b.log_set_.error_keywords};
    return b;
  }

  /// Fingerprint recorded in datasets and checkpoints so that diagnosis can
  /// refuse a model trained against different extractors.
  std::string fingerprint() const { return hex64(fnv1a(to_json().dump())); }

 private:
  ExtractorConfig cfg_;
  MetricBaseline baseline_;
  TraceDetector trace_;
  DrainParser drain_;
  LogAlertSet log_set_;
  std::set<int> error_level_ids_;
};

}  // namespace mvdiag
