#pragma once

// Synthetic microservice telemetry with scripted fault propagation. Every
// request draws from its own random stream and faults from separate ones, so
// injecting a fault never shifts the randomness of unrelated requests.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvdiag/common.hpp"
#include "mvdiag/telemetry.hpp"

namespace mvdiag {

struct ServiceSpec {
  std::string name;
  int instances = 1;
  double latency_ms = 10.0;  // median own processing time
};

struct CallEdge {
  std::string caller;
  std::string callee;
  std::string operation;
};

struct Topology {
  std::vector<ServiceSpec> services;
  std::vector<CallEdge> edges;
  std::string frontend;

  static std::string instance_name(const std::string& service, int k) { return service + "-" + std::to_string(k); }

  std::vector<std::string> instances() const {
    std::vector<std::string> out;
    for (const auto& s : services)
      for (int k = 0; k < s.instances; ++k) out.push_back(instance_name(s.name, k));
    return out;
  }

  const ServiceSpec& service(const std::string& name) const {
    for (const auto& s : services)
      if (s.name == name) return s;
    throw Error(ErrorCode::InvalidArgument, "unknown service " + name);
  }

  std::string service_of(const std::string& instance) const {
    for (const auto& s : services)
      for (int k = 0; k < s.instances; ++k)
        if (instance_name(s.name, k) == instance) return s.name;
    throw Error(ErrorCode::FaultTargetUnknown, "unknown instance " + instance);
  }

  std::vector<CallEdge> calls_from(const std::string& service) const {
    std::vector<CallEdge> out;
    for (const auto& e : edges)
      if (e.caller == service) out.push_back(e);
    return out;
  }

  /// Acyclic, every service reachable from the frontend, edges between
  /// declared services.
  void validate() const {
    std::set<std::string> names;
    for (const auto& s : services) {
      if (s.instances < 1) throw Error(ErrorCode::InvalidConfig, "service " + s.name + " has no instances");
      names.insert(s.name);
    }
    if (!names.count(frontend)) throw Error(ErrorCode::InvalidConfig, "frontend is not a service");
    for (const auto& e : edges)
      if (!names.count(e.caller) || !names.count(e.callee))
        throw Error(ErrorCode::InvalidConfig, "edge references an unknown service");
    std::map<std::string, int> state;  // 1 visiting, 2 done
    std::function<void(const std::string&)> visit = [&](const std::string& s) {
      if (state[s] == 1) throw Error(ErrorCode::InvalidConfig, "call graph has a cycle through " + s);
      if (state[s] == 2) return;
      state[s] = 1;
      for (const auto& e : calls_from(s)) visit(e.callee);
      state[s] = 2;
    };
    visit(frontend);
    for (const auto& n : names)
      if (state[n] != 2) throw Error(ErrorCode::InvalidConfig, "service " + n + " unreachable from frontend");
  }
};

/// Five services with two instances each over a three-level call DAG.
inline Topology desk_topology() {
  return {{{"frontend", 2, 8.0}, {"product", 2, 12.0}, {"cart", 2, 10.0}, {"order", 2, 15.0}, {"storage", 2, 5.0}},
          {{"frontend", "product", "GetProduct"},
           {"frontend", "cart", "GetCart"},
           {"frontend", "order", "PlaceOrder"},
           {"cart", "storage", "ReadKV"},
           {"order", "storage", "WriteKV"},
           {"order", "product", "GetPrice"}},
          "frontend"};
}

enum class FaultType { CpuHog, MemStress, NetDelay, PacketLoss, PacketCorruption, ProcessExit };

inline constexpr std::array<FaultType, 6> kFaultTypes{FaultType::CpuHog,     FaultType::MemStress,
                                                      FaultType::NetDelay,   FaultType::PacketLoss,
                                                      FaultType::PacketCorruption, FaultType::ProcessExit};

inline std::string to_string(FaultType t) {
  switch (t) {
    case FaultType::CpuHog: return "cpu-hog";
    case FaultType::MemStress: return "mem-stress";
    case FaultType::NetDelay: return "net-delay";
    case FaultType::PacketLoss: return "packet-loss";
    case FaultType::PacketCorruption: return "packet-corruption";
    case FaultType::ProcessExit: return "process-exit";
  }
  return "?";
}

inline FaultType parse_fault_type(const std::string& s) {
  for (auto t : kFaultTypes)
    if (to_string(t) == s) return t;
  throw Error(ErrorCode::InvalidArgument, "unknown fault type " + s);
}

struct FaultSpec {
  FaultType type = FaultType::CpuHog;
  std::string target_instance;
  TimestampMs start_ts = 0;
  std::int64_t duration_ms = 0;
  double severity = 1.0;

  bool active(TimestampMs t) const { return start_ts <= t && t < start_ts + duration_ms; }
};

/// Extra own-latency of net-delay at a given severity.
inline double net_delay_ms(double severity) { return std::round(150.0 + 150.0 * severity); }

struct SimulationConfig {
  double rps = 0.5;
  TimestampMs start_ts = 1'700'000'000'000;
  std::int64_t duration_ms = 0;
  std::int64_t metric_interval_ms = 15'000;
  double latency_sigma = 0.15;  // lognormal shape of own latency
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> kNames{"cpu_usage",    "memory_usage",  "network_in",
                                               "network_out",  "request_count", "error_count"};
  return kNames;
}

/// One message generator per distinct log template; {n} is a decimal, {ip}
/// an IPv4 address, {op} is fixed per entry.
struct LogGenerator {
  std::string pattern;
  Level level;
};

inline std::string instance_ip(const Topology& topo, const std::string& instance) {
  int s = 0;
  for (const auto& svc : topo.services) {
    for (int k = 0; k < svc.instances; ++k)
      if (Topology::instance_name(svc.name, k) == instance) return "10.0." + std::to_string(s) + "." + std::to_string(10 + k);
    ++s;
  }
  return "10.0.255.1";
}

/// Benign events that occur only a few times a day per instance.
inline const std::vector<std::string>& rare_log_patterns() {
  static const std::vector<std::string> kPatterns{
      "configuration reloaded from revision {n}",    "slow query on table orders took {n} ms",
      "retrying connection to {ip} attempt {n}",      "evicted {n} stale entries from local cache",
      "session store compacted to {n} keys",          "tls certificate renewal scheduled in {n} hours",
      "garbage collector paused threads for {n} ms",  "worker pool resized to {n} threads",
      "dns cache refreshed with {n} records"};
  return kPatterns;
}

/// Every template the generator can emit, each with only maskable variables.
inline std::vector<LogGenerator> log_template_inventory(const Topology& topo = desk_topology()) {
  std::vector<LogGenerator> out;
  std::set<std::string> ops;
  for (const auto& e : topo.edges) ops.insert(e.operation);
  for (const auto& op : ops) out.push_back({"handled " + op + " request in {n} ms", Level::parse("INFO")});
  out.push_back({"handled page request in {n} ms", Level::parse("INFO")});
  out.push_back({"cache refresh completed: {n} entries loaded", Level::parse("INFO")});
  out.push_back({"connection pool stats: active={n} idle={n}", Level::parse("DEBUG")});
  out.push_back({"health check passed in {n} ms", Level::parse("INFO")});
  for (const auto& rare : rare_log_patterns()) out.push_back({rare, Level::parse("INFO")});
  out.push_back({"memory allocation failed: heap usage above {n} percent", Level::parse("ERROR")});
  out.push_back({"tcp: i/o timeout while reading from {ip}", Level::parse("ERROR")});
  out.push_back({"tcp: checksum mismatch, dropping corrupted segment from {ip}", Level::parse("ERROR")});
  out.push_back({"worker process exited unexpectedly with status {n}", Level::parse("ERROR")});
  return out;
}

inline std::string render(const std::string& pattern, Rng& rng, const std::string& ip) {
  std::string out;
  std::uniform_int_distribution<int> number(1, 9999);
  for (std::size_t i = 0; i < pattern.size();) {
    if (pattern.compare(i, 3, "{n}") == 0) {
      out += std::to_string(number(rng));
      i += 3;
    } else if (pattern.compare(i, 4, "{ip}") == 0) {
      out += ip;
      i += 4;
    } else {
      out += pattern[i++];
    }
  }
  return out;
}

struct SimulationOutput {
  std::vector<MetricSample> metrics;
  std::vector<Span> spans;
  std::vector<LogEntry> logs;
  std::vector<FailureRecord> labels;
};

class Simulator {
 public:
  Simulator(Topology topo, SimulationConfig cfg, std::vector<FaultSpec> faults)
      : topo_(std::move(topo)), cfg_(cfg), faults_(std::move(faults)) {
    topo_.validate();
    if (cfg_.duration_ms <= 0 || !(cfg_.rps > 0.0)) throw Error(ErrorCode::InvalidConfig, "need positive duration and rps");
    auto names = topo_.instances();
    for (const auto& f : faults_) {
      if (std::find(names.begin(), names.end(), f.target_instance) == names.end())
        throw Error(ErrorCode::FaultTargetUnknown, f.target_instance);
      if (f.start_ts < cfg_.start_ts || f.start_ts + f.duration_ms > cfg_.start_ts + cfg_.duration_ms)
        throw Error(ErrorCode::InvalidArgument, "fault window outside the simulated span");
      if (!(f.severity > 0.0 && f.severity <= 1.0)) throw Error(ErrorCode::InvalidArgument, "severity must be in (0,1]");
    }
  }

  SimulationOutput run() const {
    SimulationOutput out;
    generate_traces(out);
    generate_metrics(out);
    generate_background_logs(out);
    generate_fault_logs(out);
    for (const auto& f : faults_) out.labels.push_back({f.start_ts, f.target_instance, to_string(f.type)});
    TelemetryBundle bundle{std::move(out.metrics), std::move(out.spans), std::move(out.logs)};
    canonicalize(bundle);
    out.metrics = std::move(bundle.metrics);
    out.spans = std::move(bundle.spans);
    out.logs = std::move(bundle.logs);
    return out;
  }

  json manifest() const {
    json services = json::array();
    for (const auto& s : topo_.services)
      services.push_back({{"name", s.name}, {"instances", s.instances}, {"latency_ms", s.latency_ms}});
    json edges = json::array();
    for (const auto& e : topo_.edges) edges.push_back({{"caller", e.caller}, {"callee", e.callee}, {"operation", e.operation}});
    json faults = json::array();
    for (const auto& f : faults_) {
      faults.push_back({{"type", to_string(f.type)},
                        {"target", f.target_instance},
                        {"start_ts", f.start_ts},
                        {"duration_ms", f.duration_ms},
                        {"severity", f.severity}});
    }
    return {{"topology", {{"services", services}, {"edges", edges}, {"frontend", topo_.frontend}}},
            {"rps", cfg_.rps},
            {"start_ts", cfg_.start_ts},
            {"duration_ms", cfg_.duration_ms},
            {"metric_interval_ms", cfg_.metric_interval_ms},
            {"seed", cfg_.seed},
            {"faults", faults}};
  }

  const Topology& topology() const { return topo_; }

 private:
  const FaultSpec* fault_at(const std::string& instance, TimestampMs t) const {
    for (const auto& f : faults_)
      if (f.target_instance == instance && f.active(t)) return &f;
    return nullptr;
  }

  struct SpanResult {
    std::int64_t duration = 0;
    bool ok = true;
  };

  SpanResult emit_span(SimulationOutput& out, Rng& rng, Rng& fault_rng, const std::string& trace_id, int& next_span,
                       const std::optional<std::string>& parent, const std::string& service,
                       const std::string& operation, TimestampMs start, const std::string& reporter_op) const {
    const auto& svc = topo_.service(service);
    std::uniform_int_distribution<int> pick(0, svc.instances - 1);
    std::string instance = Topology::instance_name(service, pick(rng));
    std::lognormal_distribution<double> own_latency(std::log(svc.latency_ms), cfg_.latency_sigma);
    double own = own_latency(rng);
    std::string span_id = "s" + std::to_string(next_span++);
    std::size_t slot = out.spans.size();
    out.spans.push_back({});

    const FaultSpec* fault = fault_at(instance, start);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    bool crashed = false;
    if (fault != nullptr) {
      const double s = fault->severity;
      switch (fault->type) {
        case FaultType::CpuHog: own *= 1.0 + 4.0 * s; break;
        case FaultType::NetDelay: own += net_delay_ms(s); break;
        case FaultType::PacketLoss:
          if (unit(fault_rng) < 0.5 * s) own += 200.0;  // retransmission timeout
          break;
        case FaultType::ProcessExit: crashed = unit(fault_rng) < 0.5 + 0.4 * s; break;
        case FaultType::MemStress:
        case FaultType::PacketCorruption: break;
      }
    }

    SpanResult result;
    auto own_ms = static_cast<std::int64_t>(std::max(1.0, std::round(own)));
    if (crashed) {
      result.duration = std::min<std::int64_t>(own_ms, 3);
      result.ok = false;
      out.spans[slot] = {trace_id, span_id, parent, service, instance, operation, start, result.duration, "503"};
      return result;
    }
    std::int64_t cursor = start + own_ms / 2;
    std::int64_t children = 0;
    bool child_failed = false;
    auto calls = topo_.calls_from(service);
    if (service == topo_.frontend && !calls.empty()) {
      std::uniform_int_distribution<std::size_t> choose(0, calls.size() - 1);
      calls = {calls[choose(rng)]};
    }
    for (const auto& call : calls) {
      auto child = emit_span(out, rng, fault_rng, trace_id, next_span, span_id, call.callee, call.operation, cursor, call.operation);
      cursor += child.duration;
      children += child.duration;
      child_failed = child_failed || !child.ok;
    }
    result.duration = own_ms + children;
    result.ok = !child_failed;
    out.spans[slot] = {trace_id,     span_id, parent, service, instance, operation, start, result.duration,
                       result.ok ? "200" : "500"};
    (void)reporter_op;
    // Request log at completion.
    out.logs.push_back({instance, start + result.duration, Level::parse("INFO"),
                        "handled " + (parent ? operation : std::string("page")) + " request in " +
                            std::to_string(result.duration) + " ms"});
    return result;
  }

  void generate_traces(SimulationOutput& out) const {
    const double period = 1000.0 / cfg_.rps;
    const auto count = static_cast<std::int64_t>(static_cast<double>(cfg_.duration_ms) / period);
    const std::uint64_t request_root = derive_seed(cfg_.seed, "requests");
    const std::uint64_t fault_root = derive_seed(cfg_.seed, "fault-effects");
    for (std::int64_t i = 0; i < count; ++i) {
      Rng rng(derive_seed(request_root, static_cast<std::uint64_t>(i)));
      Rng fault_rng(derive_seed(fault_root, static_cast<std::uint64_t>(i)));
      std::uniform_real_distribution<double> jitter(0.0, period * 0.5);
      auto start = cfg_.start_ts + static_cast<TimestampMs>(static_cast<double>(i) * period + jitter(rng));
      int next_span = 0;
      std::string trace_id = "t" + std::to_string(i);
      emit_span(out, rng, fault_rng, trace_id, next_span, std::nullopt, topo_.frontend, "HandlePage", start, "");
    }
  }

  void generate_metrics(SimulationOutput& out) const {
    struct Base {
      double mean;
      double sd;
    };
    const std::map<std::string, Base> base{{"cpu_usage", {0.30, 0.02}},     {"memory_usage", {0.50, 0.02}},
                                           {"network_in", {120.0, 5.0}},    {"network_out", {100.0, 5.0}},
                                           {"request_count", {50.0, 3.0}},  {"error_count", {0.5, 0.05}}};
    for (const auto& instance : topo_.instances()) {
      for (const auto& metric : metric_names()) {
        Rng rng(derive_seed(cfg_.seed, "metric|" + instance + "|" + metric));
        const auto& b = base.at(metric);
        std::normal_distribution<double> noise(0.0, b.sd);
        for (TimestampMs t = cfg_.start_ts; t < cfg_.start_ts + cfg_.duration_ms; t += cfg_.metric_interval_ms) {
          double v = b.mean + noise(rng);
          if (const auto* f = fault_at(instance, t)) v = perturb(metric, v, b.mean, b.sd, *f);
          out.metrics.push_back({instance, metric, t, std::max(0.0, v)});
        }
      }
    }
  }

  // Signature metric shifts at the fault's root instance.
  static double perturb(const std::string& metric, double v, double mean, double sd, const FaultSpec& f) {
    const double s = f.severity;
    switch (f.type) {
      case FaultType::CpuHog:
        if (metric == "cpu_usage") return v + 0.4 * s;
        break;
      case FaultType::MemStress:
        if (metric == "memory_usage") return v + 0.3 * s;
        break;
      case FaultType::PacketLoss:
        if (metric == "network_in" || metric == "network_out") return v - 0.5 * s * mean;
        break;
      case FaultType::PacketCorruption:
        if (metric == "network_in") return v - 0.5 * s * mean;
        break;
      case FaultType::ProcessExit:
        if (metric == "cpu_usage" || metric == "network_in" || metric == "network_out" || metric == "request_count")
          return v - 0.7 * mean;
        if (metric == "error_count") return v + 20.0 * sd + 10.0 * s;
        break;
      case FaultType::NetDelay: break;
    }
    return v;
  }

  void generate_background_logs(SimulationOutput& out) const {
    const TimestampMs end = cfg_.start_ts + cfg_.duration_ms;
    for (const auto& instance : topo_.instances()) {
      Rng rng(derive_seed(cfg_.seed, "logs|" + instance));
      std::uniform_int_distribution<int> phase(0, 29'999);
      std::uniform_int_distribution<int> small(0, 16);
      std::uniform_int_distribution<int> entries(100, 5000);
      std::uniform_int_distribution<int> quick(1, 40);
      TimestampMs offset = phase(rng);
      for (TimestampMs t = cfg_.start_ts + offset; t < end; t += 30'000) {
        out.logs.push_back({instance, t, Level::parse("DEBUG"),
                            "connection pool stats: active=" + std::to_string(small(rng)) +
                                " idle=" + std::to_string(small(rng))});
        if (((t - cfg_.start_ts - offset) / 30'000) % 2 == 0)
          out.logs.push_back({instance, t + 7, Level::parse("INFO"),
                              "cache refresh completed: " + std::to_string(entries(rng)) + " entries loaded"});
        if (((t - cfg_.start_ts - offset) / 30'000) % 4 == 1)
          out.logs.push_back({instance, t + 11, Level::parse("INFO"),
                              "health check passed in " + std::to_string(quick(rng)) + " ms"});
      }
      // Rare benign events, mean gap between 2 and 10 hours per instance.
      auto instances = topo_.instances();
      std::uniform_int_distribution<std::size_t> peer(0, instances.size() - 1);
      const auto& rare = rare_log_patterns();
      for (std::size_t r = 0; r < rare.size(); ++r) {
        std::exponential_distribution<double> gap(1.0 / ((2.0 + static_cast<double>(r)) * 3600'000.0));
        for (double t = static_cast<double>(cfg_.start_ts) + gap(rng); t < static_cast<double>(end); t += gap(rng)) {
          out.logs.push_back({instance, static_cast<TimestampMs>(t), Level::parse("INFO"),
                              render(rare[r], rng, instance_ip(topo_, instances[peer(rng)]))});
        }
      }
    }
  }

  void generate_fault_logs(SimulationOutput& out) const {
    auto instances = topo_.instances();
    for (std::size_t i = 0; i < faults_.size(); ++i) {
      const auto& f = faults_[i];
      Rng rng(derive_seed(derive_seed(cfg_.seed, "fault-logs"), static_cast<std::uint64_t>(i)));
      std::string pattern;
      switch (f.type) {
        case FaultType::MemStress: pattern = "memory allocation failed: heap usage above {n} percent"; break;
        case FaultType::PacketLoss: pattern = "tcp: i/o timeout while reading from {ip}"; break;
        case FaultType::PacketCorruption: pattern = "tcp: checksum mismatch, dropping corrupted segment from {ip}"; break;
        case FaultType::ProcessExit: pattern = "worker process exited unexpectedly with status {n}"; break;
        case FaultType::CpuHog:
        case FaultType::NetDelay: continue;
      }
      std::exponential_distribution<double> gap(1.0 / 10'000.0);
      std::uniform_int_distribution<std::size_t> peer(0, instances.size() - 1);
      for (double t = static_cast<double>(f.start_ts) + gap(rng); t < static_cast<double>(f.start_ts + f.duration_ms);
           t += gap(rng)) {
        std::string ip = instance_ip(topo_, instances[peer(rng)]);
        out.logs.push_back({f.target_instance, static_cast<TimestampMs>(t), Level::parse("ERROR"), render(pattern, rng, ip)});
      }
    }
  }

  Topology topo_;
  SimulationConfig cfg_;
  std::vector<FaultSpec> faults_;
};

/// The labeled benchmark scenario: a clean training prefix followed by
/// evenly spaced faults cycling through every type on random non-frontend
/// instances.
struct ScenarioConfig {
  std::uint64_t seed = 7;
  double rps = 0.2;
  TimestampMs start_ts = 1'700'000'000'000;
  std::int64_t clean_ms = 40 * 60'000;
  int faults_per_type = 20;
  std::int64_t fault_interval_ms = 10 * 60'000;
  std::int64_t fault_duration_ms = 5 * 60'000;
  double severity_min = 0.6;
  double severity_max = 1.0;
};

struct Scenario {
  Topology topology;
  SimulationConfig sim;
  std::vector<FaultSpec> faults;

  TimeWindow training_window() const { return {sim.start_ts, faults.empty() ? sim.start_ts + sim.duration_ms : faults.front().start_ts}; }
};

inline Scenario make_scenario(const ScenarioConfig& cfg, Topology topo = desk_topology()) {
  Scenario sc;
  sc.topology = std::move(topo);
  sc.topology.validate();
  Rng rng(derive_seed(cfg.seed, "scenario"));
  std::vector<FaultType> order;
  for (auto t : kFaultTypes)
    for (int i = 0; i < cfg.faults_per_type; ++i) order.push_back(t);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::string> targets;
  for (const auto& inst : sc.topology.instances())
    if (sc.topology.service_of(inst) != sc.topology.frontend) targets.push_back(inst);
  std::uniform_int_distribution<std::size_t> pick(0, targets.size() - 1);
  std::uniform_real_distribution<double> severity(cfg.severity_min, cfg.severity_max);
  std::uniform_int_distribution<std::int64_t> lead(30'000, 60'000);
  for (std::size_t i = 0; i < order.size(); ++i) {
    TimestampMs slot = cfg.start_ts + cfg.clean_ms + static_cast<TimestampMs>(i) * cfg.fault_interval_ms;
    sc.faults.push_back({order[i], targets[pick(rng)], slot + lead(rng), cfg.fault_duration_ms, severity(rng)});
  }
  sc.sim.rps = cfg.rps;
  sc.sim.start_ts = cfg.start_ts;
  sc.sim.duration_ms = cfg.clean_ms + static_cast<std::int64_t>(order.size()) * cfg.fault_interval_ms;
  sc.sim.seed = cfg.seed;
  return sc;
}

inline SimulationOutput generate(const Topology& topo, const SimulationConfig& cfg, const std::vector<FaultSpec>& faults) {
  return Simulator(topo, cfg, faults).run();
}

inline void write_corpus(const std::string& dir, const SimulationOutput& out, const json& manifest) {
  std::filesystem::create_directories(dir);
  save_jsonl(dir + "/metrics.jsonl", out.metrics);
  save_jsonl(dir + "/traces.jsonl", out.spans);
  save_jsonl(dir + "/logs.jsonl", out.logs);
  save_jsonl(dir + "/labels.jsonl", out.labels);
  std::ofstream m(dir + "/manifest.json");
  if (!m) throw Error(ErrorCode::IoError, "cannot write manifest in " + dir);
  m << manifest.dump(2) << '\n';
}

}  // namespace mvdiag
