#pragma once

// Canonical records for the three telemetry modalities, JSONL file I/O and
// half-open time-window slicing.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mvdiag/common.hpp"

namespace mvdiag {

using json = nlohmann::json;
using TimestampMs = std::int64_t;

struct MetricSample {
  std::string instance_id;
  std::string metric_name;
  TimestampMs timestamp = 0;
  double value = 0.0;

  bool operator==(const MetricSample&) const = default;
};

struct Span {
  std::string trace_id;
  std::string span_id;
  std::optional<std::string> parent_span_id;
  std::string service;
  std::string instance_id;
  std::string operation;
  TimestampMs start_ts = 0;
  std::int64_t duration = 0;
  std::string status_code;

  TimestampMs end_ts() const { return start_ts + duration; }
  bool is_root() const { return !parent_span_id.has_value(); }
  bool operator==(const Span&) const = default;
};

enum class LogLevel { Info, Warn, Error, Debug, Other };

/// Level with the raw text kept for levels outside the known four.
struct Level {
  LogLevel kind = LogLevel::Info;
  std::string other;

  static Level parse(const std::string& text) {
    if (text == "INFO") return {LogLevel::Info, {}};
    if (text == "WARN" || text == "WARNING") return {LogLevel::Warn, {}};
    if (text == "ERROR") return {LogLevel::Error, {}};
    if (text == "DEBUG") return {LogLevel::Debug, {}};
    return {LogLevel::Other, text};
  }

  std::string str() const {
    switch (kind) {
      case LogLevel::Info: return "INFO";
      case LogLevel::Warn: return "WARN";
      case LogLevel::Error: return "ERROR";
      case LogLevel::Debug: return "DEBUG";
      case LogLevel::Other: return other;
    }
    return other;
  }

  bool operator==(const Level&) const = default;
};

struct LogEntry {
  std::string instance_id;
  TimestampMs timestamp = 0;
  Level level;
  std::string message;

  bool operator==(const LogEntry&) const = default;
};

struct TimeWindow {
  TimestampMs start_ts = 0;
  TimestampMs end_ts = 0;

  TimeWindow() = default;
  TimeWindow(TimestampMs start, TimestampMs end) : start_ts(start), end_ts(end) {
    if (!(start < end)) throw Error(ErrorCode::InvalidArgument, "time window requires start < end");
  }

  bool contains(TimestampMs t) const { return start_ts <= t && t < end_ts; }
  bool operator==(const TimeWindow&) const = default;
};

struct FailureRecord {
  TimestampMs inject_ts = 0;
  std::string root_cause_instance;
  std::string failure_type;

  bool operator==(const FailureRecord&) const = default;
};

inline TimestampMs timestamp_of(const MetricSample& m) { return m.timestamp; }
inline TimestampMs timestamp_of(const Span& s) { return s.start_ts; }
inline TimestampMs timestamp_of(const LogEntry& l) { return l.timestamp; }
inline TimestampMs timestamp_of(const FailureRecord& f) { return f.inject_ts; }

template <typename T>
concept Timestamped = requires(const T& record) {
  { timestamp_of(record) } -> std::convertible_to<TimestampMs>;
};

/// Records with start_ts <= t < end_ts, in input order.
template <Timestamped T>
std::vector<T> slice(const std::vector<T>& records, const TimeWindow& window) {
  std::vector<T> out;
  for (const auto& record : records) {
    if (window.contains(timestamp_of(record))) out.push_back(record);
  }
  return out;
}

/// All three modalities for one system snapshot.
struct TelemetryBundle {
  std::vector<MetricSample> metrics;
  std::vector<Span> spans;
  std::vector<LogEntry> logs;

  TelemetryBundle slice(const TimeWindow& window) const {
    return {mvdiag::slice(metrics, window), mvdiag::slice(spans, window), mvdiag::slice(logs, window)};
  }

  bool empty() const { return metrics.empty() && spans.empty() && logs.empty(); }
};

// ---------------------------------------------------------------------------
// JSON schema

namespace detail {

inline const json& require(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) throw std::invalid_argument(std::string("missing field '") + key + "'");
  return *it;
}

inline std::string require_string(const json& j, const char* key) {
  const auto& v = require(j, key);
  if (!v.is_string()) throw std::invalid_argument(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

inline std::int64_t require_int(const json& j, const char* key) {
  const auto& v = require(j, key);
  if (!v.is_number_integer()) throw std::invalid_argument(std::string("field '") + key + "' must be an integer");
  return v.get<std::int64_t>();
}

inline double require_number(const json& j, const char* key) {
  const auto& v = require(j, key);
  if (!v.is_number()) throw std::invalid_argument(std::string("field '") + key + "' must be a number");
  return v.get<double>();
}

}  // namespace detail

inline void to_json(json& j, const MetricSample& m) {
  j = json{{"instance", m.instance_id}, {"metric", m.metric_name}, {"ts", m.timestamp}, {"value", m.value}};
}

inline void from_json(const json& j, MetricSample& m) {
  m.instance_id = detail::require_string(j, "instance");
  m.metric_name = detail::require_string(j, "metric");
  m.timestamp = detail::require_int(j, "ts");
  m.value = detail::require_number(j, "value");
  if (m.metric_name.empty()) throw std::invalid_argument("metric name is empty");
  if (m.timestamp < 0) throw std::invalid_argument("negative timestamp");
  if (!std::isfinite(m.value)) throw std::invalid_argument("non-finite metric value");
}

inline void to_json(json& j, const Span& s) {
  j = json{{"trace_id", s.trace_id},
           {"span_id", s.span_id},
           {"parent_span_id", s.parent_span_id ? json(*s.parent_span_id) : json(nullptr)},
           {"service", s.service},
           {"instance", s.instance_id},
           {"operation", s.operation},
           {"start_ts", s.start_ts},
           {"duration_ms", s.duration},
           {"status", s.status_code}};
}

inline void from_json(const json& j, Span& s) {
  s.trace_id = detail::require_string(j, "trace_id");
  s.span_id = detail::require_string(j, "span_id");
  auto parent = j.find("parent_span_id");
  if (parent != j.end() && !parent->is_null()) {
    if (!parent->is_string()) throw std::invalid_argument("field 'parent_span_id' must be a string");
    s.parent_span_id = parent->get<std::string>();
  } else {
    s.parent_span_id.reset();
  }
  s.service = detail::require_string(j, "service");
  s.instance_id = detail::require_string(j, "instance");
  s.operation = detail::require_string(j, "operation");
  s.start_ts = detail::require_int(j, "start_ts");
  s.duration = detail::require_int(j, "duration_ms");
  s.status_code = detail::require_string(j, "status");
  if (s.duration < 0) throw std::invalid_argument("negative span duration");
}

inline void to_json(json& j, const LogEntry& l) {
  j = json{{"instance", l.instance_id}, {"ts", l.timestamp}, {"level", l.level.str()}, {"message", l.message}};
}

inline void from_json(const json& j, LogEntry& l) {
  l.instance_id = detail::require_string(j, "instance");
  l.timestamp = detail::require_int(j, "ts");
  l.level = Level::parse(detail::require_string(j, "level"));
  l.message = detail::require_string(j, "message");
  if (l.message.empty()) throw std::invalid_argument("log message is empty");
}

inline void to_json(json& j, const FailureRecord& f) {
  j = json{{"inject_ts", f.inject_ts}, {"root_cause", f.root_cause_instance}, {"failure_type", f.failure_type}};
}

inline void from_json(const json& j, FailureRecord& f) {
  f.inject_ts = detail::require_int(j, "inject_ts");
  f.root_cause_instance = detail::require_string(j, "root_cause");
  f.failure_type = detail::require_string(j, "failure_type");
}

// ---------------------------------------------------------------------------
// JSONL I/O

/// Parses one record per non-blank line. Throws MalformedRecord with the
/// 1-based line number, or IoError if the file cannot be opened.
template <typename T>
std::vector<T> load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::vector<T> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(json::parse(line).get<T>());
    } catch (const std::exception& e) {
      throw Error(ErrorCode::MalformedRecord, path + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  if (in.bad()) throw Error(ErrorCode::IoError, "read failure on " + path);
  return records;
}

template <typename T>
void save_jsonl(const std::string& path, const std::vector<T>& records) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  for (const auto& record : records) out << json(record).dump() << '\n';
  if (!out) throw Error(ErrorCode::IoError, "write failure on " + path);
}

enum class TelemetryKind { Metric, Trace, Log };

using TelemetryRecords = std::variant<std::vector<MetricSample>, std::vector<Span>, std::vector<LogEntry>>;

inline TelemetryRecords load_telemetry(const std::string& path, TelemetryKind kind) {
  switch (kind) {
    case TelemetryKind::Metric: return load_jsonl<MetricSample>(path);
    case TelemetryKind::Trace: return load_jsonl<Span>(path);
    case TelemetryKind::Log: return load_jsonl<LogEntry>(path);
  }
  throw Error(ErrorCode::InvalidArgument, "unknown telemetry kind");
}

// ---------------------------------------------------------------------------
// Span tree helpers

/// One parented call: `caller` invoked `callee` with the callee span's
/// operation, duration and status.
struct Invocation {
  std::string caller_instance;
  std::string callee_instance;
  std::string operation;
  std::int64_t duration = 0;
  std::string status_code;
  TimestampMs start_ts = 0;
};

/// Resolves parent links within each trace. Spans whose parent is missing
/// from the input (broken traces) are not invocations and are skipped.
inline std::vector<Invocation> extract_invocations(const std::vector<Span>& spans) {
  std::unordered_map<std::string, std::unordered_map<std::string, const Span*>> by_trace;
  for (const auto& span : spans) by_trace[span.trace_id].emplace(span.span_id, &span);
  std::vector<Invocation> out;
  for (const auto& span : spans) {
    if (!span.parent_span_id) continue;
    const auto& trace = by_trace[span.trace_id];
    auto parent = trace.find(*span.parent_span_id);
    if (parent == trace.end()) continue;
    out.push_back({parent->second->instance_id, span.instance_id, span.operation, span.duration, span.status_code,
                   span.start_ts});
  }
  return out;
}

/// Deterministic ordering used where results must not depend on input order.
inline void canonicalize(TelemetryBundle& bundle) {
  std::stable_sort(bundle.metrics.begin(), bundle.metrics.end(), [](const auto& a, const auto& b) {
    return std::tie(a.timestamp, a.instance_id, a.metric_name, a.value) <
           std::tie(b.timestamp, b.instance_id, b.metric_name, b.value);
  });
  std::stable_sort(bundle.spans.begin(), bundle.spans.end(), [](const auto& a, const auto& b) {
    return std::tie(a.start_ts, a.trace_id, a.span_id) < std::tie(b.start_ts, b.trace_id, b.span_id);
  });
  std::stable_sort(bundle.logs.begin(), bundle.logs.end(), [](const auto& a, const auto& b) {
    return std::tie(a.timestamp, a.instance_id, a.message) < std::tie(b.timestamp, b.instance_id, b.message);
  });
}

}  // namespace mvdiag
