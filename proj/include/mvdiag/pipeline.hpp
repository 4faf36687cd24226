#pragma once

// Offline phase over a labeled corpus: case split, extractor fitting,
// dataset construction, training and held-out evaluation.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mvdiag/alerts.hpp"
#include "mvdiag/augment.hpp"
#include "mvdiag/config.hpp"
#include "mvdiag/dataset.hpp"
#include "mvdiag/diagnose.hpp"
#include "mvdiag/evalkit.hpp"
#include "mvdiag/simgen.hpp"
#include "mvdiag/telemetry.hpp"
#include "mvdiag/train.hpp"

namespace mvdiag {

struct Corpus {
  TelemetryBundle telemetry;
  std::vector<FailureRecord> labels;
};

inline Corpus load_corpus(const std::string& dir) {
  Corpus c;
  c.telemetry.metrics = load_jsonl<MetricSample>(dir + "/metrics.jsonl");
  c.telemetry.spans = load_jsonl<Span>(dir + "/traces.jsonl");
  c.telemetry.logs = load_jsonl<LogEntry>(dir + "/logs.jsonl");
  if (std::filesystem::exists(dir + "/labels.jsonl")) c.labels = load_jsonl<FailureRecord>(dir + "/labels.jsonl");
  canonicalize(c.telemetry);
  return c;
}

inline Corpus to_corpus(SimulationOutput out) {
  Corpus c;
  c.telemetry = {std::move(out.metrics), std::move(out.spans), std::move(out.logs)};
  c.labels = std::move(out.labels);
  return c;
}

struct FailureCase {
  std::string id;
  FailureRecord label;
  TimeWindow window;
};

/// One case per label, ordered by injection time.
inline std::vector<FailureCase> make_cases(std::vector<FailureRecord> labels, std::int64_t alert_window_ms) {
  std::sort(labels.begin(), labels.end(), [](const auto& a, const auto& b) {
    return std::tie(a.inject_ts, a.root_cause_instance) < std::tie(b.inject_ts, b.root_cause_instance);
  });
  std::vector<FailureCase> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case-%04zu", i);
    out.push_back({id, labels[i], {labels[i].inject_ts, labels[i].inject_ts + alert_window_ms}});
  }
  return out;
}

/// Clean prefix before the first injection.
inline TimeWindow default_training_window(const Corpus& c) {
  TimestampMs first = std::numeric_limits<TimestampMs>::max();
  for (const auto& m : c.telemetry.metrics) first = std::min(first, m.timestamp);
  for (const auto& s : c.telemetry.spans) first = std::min(first, s.start_ts);
  TimestampMs end = std::numeric_limits<TimestampMs>::max();
  for (const auto& l : c.labels) end = std::min(end, l.inject_ts);
  if (first == std::numeric_limits<TimestampMs>::max()) throw Error(ErrorCode::EmptyTraces, "corpus has no telemetry");
  if (end == std::numeric_limits<TimestampMs>::max()) {
    end = first;
    for (const auto& s : c.telemetry.spans) end = std::max(end, s.end_ts() + 1);
  }
  if (end <= first) throw Error(ErrorCode::InsufficientData, "no clean interval before the first fault");
  return {first, end};
}

struct CaseSplit {
  std::vector<FailureCase> train;
  std::vector<FailureCase> test;
};

/// Stratified by failure type: round(fraction * n_type) cases of each type go
/// to test after a seeded shuffle. Both halves keep injection order.
inline CaseSplit split_cases(const std::vector<FailureCase>& cases, double test_fraction, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_type;
  for (std::size_t i = 0; i < cases.size(); ++i) by_type[cases[i].label.failure_type].push_back(i);
  std::vector<bool> is_test(cases.size(), false);
  Rng rng(derive_seed(seed, "split"));
  for (auto& [type, idx] : by_type) {
    std::shuffle(idx.begin(), idx.end(), rng);
    auto k = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < k && i < idx.size(); ++i) is_test[idx[i]] = true;
  }
  CaseSplit out;
  for (std::size_t i = 0; i < cases.size(); ++i) (is_test[i] ? out.test : out.train).push_back(cases[i]);
  return out;
}

/// Failure types in first-seen order of the sorted label set.
inline std::vector<std::string> failure_type_names(const std::vector<FailureCase>& cases) {
  std::set<std::string> names;
  for (const auto& c : cases) names.insert(c.label.failure_type);
  return {names.begin(), names.end()};
}

/// Drain learns from the clean prefix plus the training cases' windows, never
/// from held-out windows.
inline ExtractorBundle fit_extractors(const Corpus& corpus, const TimeWindow& training_window,
                                      const std::vector<FailureCase>& train_cases, const ExtractorConfig& cfg,
                                      Issues* issues = nullptr) {
  auto clean = corpus.telemetry.slice(training_window);
  std::vector<LogEntry> history = clean.logs;
  for (const auto& c : train_cases) {
    auto logs = slice(corpus.telemetry.logs, c.window);
    history.insert(history.end(), logs.begin(), logs.end());
  }
  return ExtractorBundle::fit(clean, history, cfg, issues);
}

struct CaseAlerts {
  FailureCase fault;
  InstanceGraph graph;
  std::vector<Alert> alerts;
};

inline std::vector<CaseAlerts> extract_cases(const Corpus& corpus, const ExtractorBundle& extractors,
                                             const std::vector<FailureCase>& cases, Issues* issues = nullptr) {
  std::vector<CaseAlerts> out;
  for (const auto& c : cases) {
    auto window = corpus.telemetry.slice(c.window);
    if (window.spans.empty()) {
      report(issues, ErrorCode::EmptyTraces, c.id + ": no spans in window");
      continue;
    }
    out.push_back({c, build_graph(window.spans), extractors.extract(window, issues)});
  }
  return out;
}

/// One sentence per (case, node, modality) with alerts.
inline std::vector<std::vector<std::string>> alert_sentences(const std::vector<CaseAlerts>& cases) {
  std::vector<std::vector<std::string>> out;
  for (const auto& c : cases)
    for (const auto& node : group_alerts(c.graph, c.alerts))
      for (const auto& m : node)
        if (!m.empty()) out.push_back(m);
  return out;
}

inline std::vector<FailureSample> build_samples(const std::vector<CaseAlerts>& cases, const EmbeddingTable& table,
                                                const std::vector<std::string>& type_names,
                                                Issues* issues = nullptr) {
  std::vector<FailureSample> out;
  for (const auto& c : cases) {
    try {
      out.push_back(build_sample(c.graph, c.alerts, table, c.fault.label, type_names, c.fault.id));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::RootCauseNotInGraph) throw;
      report(issues, e.code(), c.fault.id + ": " + e.what());
    }
  }
  return out;
}

/// Embedding trained on training-case alerts only; train split augmented when
/// enabled.
inline Dataset build_dataset(const std::vector<CaseAlerts>& train, const std::vector<CaseAlerts>& test,
                             const std::vector<std::string>& type_names, const Config& cfg,
                             const std::string& extractor_fingerprint, Issues* issues = nullptr) {
  Dataset ds;
  ds.manifest.type_names = type_names;
  ds.manifest.embedding = cfg.embedding;
  ds.manifest.seed = cfg.seed;
  ds.manifest.extractor_fingerprint = extractor_fingerprint;
  ds.table = train_embedding(alert_sentences(train), cfg.embedding, derive_seed(cfg.seed, "embedding"));
  ds.train = build_samples(train, ds.table, type_names, issues);
  ds.test = build_samples(test, ds.table, type_names, issues);
  for (const auto& s : ds.train) ds.manifest.train_cases.push_back(s.case_id);
  for (const auto& s : ds.test) ds.manifest.test_cases.push_back(s.case_id);
  if (cfg.augment_enabled) ds.train = augment_dataset(ds.train, cfg.augment, issues);
  return ds;
}

struct CaseOutcome {
  std::string case_id;
  RclResult rcl;
  FtiResult fti;
};

inline std::vector<CaseOutcome> evaluate_samples(const Model& model, const std::vector<FailureSample>& samples) {
  std::vector<const FailureSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  auto predictions = predict(model, ptrs);
  std::vector<CaseOutcome> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto& p = predictions[i];
    CaseOutcome o;
    o.case_id = s.case_id;
    for (int v : rank_nodes(p.node_probs, s.graph.nodes)) o.rcl.ranking.push_back(s.graph.nodes[static_cast<std::size_t>(v)]);
    o.rcl.truth = s.root_cause >= 0 ? s.graph.nodes[static_cast<std::size_t>(s.root_cause)] : std::string();
    o.fti = {argmax(p.class_probs), s.failure_type};
    out.push_back(std::move(o));
  }
  return out;
}

inline EvaluationSummary summarize(const std::vector<CaseOutcome>& outcomes) {
  std::vector<RclResult> rcl;
  std::vector<FtiResult> fti;
  for (const auto& o : outcomes) {
    rcl.push_back(o.rcl);
    fti.push_back(o.fti);
  }
  return summarize(rcl, fti);
}

struct PipelineResult {
  ExtractorBundle extractors;
  Dataset dataset;
  TrainResult training;
  std::vector<CaseOutcome> outcomes;
  EvaluationSummary summary;
  std::map<std::string, double> seconds;
};

/// Extract, build, train and evaluate with one configuration.
inline PipelineResult run_pipeline(const Corpus& corpus, const Config& cfg, Issues* issues = nullptr) {
  using Clock = std::chrono::steady_clock;
  auto secs = [](Clock::time_point a, Clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
  PipelineResult r;
  auto t0 = Clock::now();
  auto cases = make_cases(corpus.labels, cfg.alert_window_ms);
  if (cases.empty()) throw Error(ErrorCode::EmptyDataset, "corpus has no labels");
  auto split = split_cases(cases, cfg.test_fraction, cfg.seed);
  auto types = failure_type_names(cases);
  r.extractors = fit_extractors(corpus, default_training_window(corpus), split.train, cfg.extractors, issues);
  auto train_alerts = extract_cases(corpus, r.extractors, split.train, issues);
  auto test_alerts = extract_cases(corpus, r.extractors, split.test, issues);
  auto t1 = Clock::now();
  r.dataset = build_dataset(train_alerts, test_alerts, types, cfg, r.extractors.fingerprint(), issues);
  auto t2 = Clock::now();
  r.training = train(r.dataset.train, model_config(cfg, static_cast<int>(types.size())), cfg.train,
                     derive_seed(cfg.seed, "train"));
  auto t3 = Clock::now();
  r.outcomes = evaluate_samples(r.training.model, r.dataset.test);
  r.summary = summarize(r.outcomes);
  auto t4 = Clock::now();
  r.seconds = {{"extract", secs(t0, t1)}, {"build", secs(t1, t2)}, {"train", secs(t2, t3)}, {"evaluate", secs(t3, t4)}};
  return r;
}

}  // namespace mvdiag
