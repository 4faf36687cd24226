#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "mvdiag/alerts.hpp"
#include "mvdiag/iforest.hpp"
#include "mvdiag/simgen.hpp"

using namespace mvdiag;

namespace {

std::vector<MetricSample> series(const std::string& inst, const std::string& metric, const std::vector<double>& v) {
  std::vector<MetricSample> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back({inst, metric, static_cast<TimestampMs>(i) * 1000, v[i]});
  return out;
}

MetricBaseline baseline_of(double mean, double sd) {
  MetricBaseline b;
  b.series[{"cart-0", "cpu_usage"}] = {mean, sd, 100};
  return b;
}

std::vector<Span> call(const std::string& trace, const std::string& caller, const std::string& callee,
                       const std::string& op, std::int64_t duration, const std::string& status, TimestampMs t = 0) {
  return {{trace, trace + "-p", std::nullopt, "svc", caller, "root", t, duration + 10, "200"},
          {trace, trace + "-c", trace + "-p", "svc", callee, op, t + 1, duration, status}};
}

// Independent score oracle: c(n) from its series definition.
double c_oracle(int n) {
  if (n <= 1) return 0.0;
  if (n == 2) return 1.0;
  // H(n-1) approximated by ln(n-1) + gamma, as in the standard score formula.
  double h = std::log(n - 1.0) + 0.5772156649015329;
  return 2.0 * h - 2.0 * (n - 1.0) / n;
}

}  // namespace

TEST(MetricBaseline, TwoPointSeries) {
  auto b = fit_metric_baseline(series("a", "m", {2, 4}));
  const auto& s = b.series.at({"a", "m"});
  EXPECT_DOUBLE_EQ(s.mean, 3.0);
  EXPECT_DOUBLE_EQ(s.std, 1.0);
}

TEST(MetricBaseline, ConstantSeries) {
  auto b = fit_metric_baseline(series("a", "m", {5, 5, 5}));
  EXPECT_DOUBLE_EQ(b.series.at({"a", "m"}).mean, 5.0);
  EXPECT_DOUBLE_EQ(b.series.at({"a", "m"}).std, 0.0);
}

TEST(MetricBaseline, MatchesTwoPassFormula) {
  Rng rng(1);
  std::normal_distribution<double> g(50.0, 7.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(2 + trial * 7);
    for (auto& x : v) x = g(rng);
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    double sd = std::sqrt(var / static_cast<double>(v.size()));
    auto s = fit_metric_baseline(series("a", "m", v)).series.at({"a", "m"});
    EXPECT_NEAR(s.mean, mean, 1e-9);
    EXPECT_NEAR(s.std, sd, 1e-9);
  }
}

TEST(MetricBaseline, ShortSeriesSkippedAndReported) {
  Issues issues;
  auto samples = series("a", "m", {1, 2, 3});
  samples.push_back({"b", "m", 0, 1.0});
  auto b = fit_metric_baseline(samples, &issues);
  EXPECT_EQ(b.series.size(), 1u);
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_EQ(issues[0].code, ErrorCode::InsufficientData);
}

TEST(MetricAlerts, ThresholdCrossings) {
  auto b = baseline_of(10, 1);
  auto up = detect_metric_alerts(series("cart-0", "cpu_usage", {14}), b);
  ASSERT_EQ(up.size(), 1u);
  EXPECT_EQ(std::get<MetricPayload>(up[0].payload).direction, Direction::Up);

  EXPECT_TRUE(detect_metric_alerts(series("cart-0", "cpu_usage", {7, 10, 13, 12.9}), b).empty());

  auto both = detect_metric_alerts(series("cart-0", "cpu_usage", {14, 5, 15, 4}), b);
  ASSERT_EQ(both.size(), 2u);
  EXPECT_EQ(std::get<MetricPayload>(both[0].payload).direction, Direction::Up);
  EXPECT_EQ(std::get<MetricPayload>(both[1].payload).direction, Direction::Down);
  EXPECT_EQ(both[0].reporter_id, "cart-0");
}

TEST(MetricAlerts, SigmaFloorOnConstantBaseline) {
  auto b = baseline_of(5, 0);
  EXPECT_TRUE(detect_metric_alerts(series("cart-0", "cpu_usage", {5}), b).empty());
  EXPECT_EQ(detect_metric_alerts(series("cart-0", "cpu_usage", {5.001}), b).size(), 1u);
}

TEST(MetricAlerts, UnknownSeriesReported) {
  Issues issues;
  EXPECT_TRUE(detect_metric_alerts(series("x-0", "cpu_usage", {1}), baseline_of(0, 1), &issues).empty());
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_EQ(issues[0].code, ErrorCode::UnknownSeries);
}

TEST(MetricAlerts, CleanFalseAlertRateAndSpikeRecall) {
  const double tail = std::erfc(3.0 / std::sqrt(2.0));  // two-sided P(|z| > 3)
  long checked = 0, false_alerts = 0, misses = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(20.0, 2.0);
    std::vector<double> v(240);
    for (auto& x : v) x = g(rng);
    auto training = series("cart-0", "cpu_usage", v);
    auto b = fit_metric_baseline(training);
    for (const auto& s : training) {
      ++checked;
      if (!detect_metric_alerts({s}, b).empty()) ++false_alerts;
    }
    const auto& st = b.series.at({"cart-0", "cpu_usage"});
    MetricSample spike{"cart-0", "cpu_usage", 999'000, st.mean + 5.0 * st.std};
    auto hit = detect_metric_alerts({spike}, b);
    if (hit.size() != 1 || std::get<MetricPayload>(hit[0].payload).direction != Direction::Up) ++misses;
  }
  EXPECT_EQ(misses, 0);
  EXPECT_LE(static_cast<double>(false_alerts) / static_cast<double>(checked), 4.0 * tail);
}

TEST(IForest, AveragePathLength) {
  EXPECT_EQ(average_path_length(1), 0.0);
  EXPECT_EQ(average_path_length(2), 1.0);
  for (int n : {3, 10, 256}) EXPECT_NEAR(average_path_length(n), c_oracle(n), 1e-12);
}

TEST(IForest, HandBuiltTreeScore) {
  using Tree = IsolationTree<2>;
  // Root splits duration at 50: one point left, 255 right.
  std::vector<Tree::Node> nodes{{0, 50.0, 1, 2, 256}, {-1, 0, -1, -1, 1}, {-1, 0, -1, -1, 255}};
  auto forest = IsolationForest<2>::from_trees({Tree::from_nodes(nodes)}, 256);
  double c = c_oracle(256);
  EXPECT_NEAR(forest.score({10.0, 1.0}), std::pow(2.0, -(1.0 + 0.0) / c), 1e-12);
  EXPECT_NEAR(forest.score({100.0, 1.0}), std::pow(2.0, -(1.0 + c_oracle(255)) / c), 1e-12);
}

TEST(IForest, IdenticalPointsScoreHalf) {
  std::vector<std::array<double, 2>> pts(300, {100.0, 1.0});
  Rng rng(3);
  IsolationForest<2> forest(pts, 50, 256, rng);
  EXPECT_NEAR(forest.score({100.0, 1.0}), 0.5, 1e-12);
}

TEST(IForest, OutlierRanksAboveNormal) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(100.0, 5.0);
    std::vector<std::array<double, 2>> pts(255);
    for (auto& p : pts) p = {g(rng), 1.0};
    IsolationForest<2> forest(pts, 100, 256, rng);
    if (forest.score({10000.0, 1.0}) > forest.score({100.0, 1.0})) ++wins;
  }
  EXPECT_GE(wins, 48);
}

TEST(IForest, JsonRoundTrip) {
  Rng rng(5);
  std::normal_distribution<double> g(100.0, 5.0);
  std::vector<std::array<double, 2>> pts(100);
  for (auto& p : pts) p = {g(rng), 1.0};
  IsolationForest<2> forest(pts, 20, 64, rng);
  auto back = IsolationForest<2>::from_json(forest.to_json());
  for (double d : {50.0, 100.0, 130.0, 1e4}) EXPECT_EQ(back.score({d, 1.0}), forest.score({d, 1.0}));
}

namespace {

std::vector<Span> training_calls(std::uint64_t seed, int n = 300) {
  Rng rng(seed);
  std::normal_distribution<double> g(100.0, 5.0);
  std::vector<Span> spans;
  for (int i = 0; i < n; ++i) {
    auto pair = call("t" + std::to_string(i), "frontend-0", "product-1", "GetProduct",
                     static_cast<std::int64_t>(std::llround(g(rng))), "200", i * 1000);
    spans.insert(spans.end(), pair.begin(), pair.end());
  }
  return spans;
}

}  // namespace

TEST(TraceAlerts, AbnormalStatus) {
  auto model = fit_trace_detector(training_calls(1));
  auto alerts = detect_trace_alerts(call("w", "frontend-0", "product-1", "GetProduct", 100, "500"), model);
  ASSERT_EQ(alerts.size(), 1u);
  EXPECT_EQ(alerts[0].reporter_id, "product-1");
  EXPECT_EQ(std::get<TracePayload>(alerts[0].payload),
            (TracePayload{"frontend-0", "GetProduct", "500"}));
}

TEST(TraceAlerts, MedianDurationIsQuiet) {
  auto model = fit_trace_detector(training_calls(2));
  EXPECT_TRUE(detect_trace_alerts(call("w", "frontend-0", "product-1", "GetProduct", 100, "200"), model).empty());
}

TEST(TraceAlerts, HundredfoldLatencyIsDegradation) {
  int flagged = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    TraceDetectorConfig cfg;
    cfg.seed = seed;
    auto model = fit_trace_detector(training_calls(seed), cfg);
    auto alerts = detect_trace_alerts(call("w", "frontend-0", "product-1", "GetProduct", 10000, "200"), model);
    if (alerts.size() == 1 && std::get<TracePayload>(alerts[0].payload).abnormal_type == kPerformanceDegradation)
      ++flagged;
  }
  EXPECT_EQ(flagged, 50);
}

TEST(TraceAlerts, DeduplicatedPerKey) {
  auto model = fit_trace_detector(training_calls(3));
  std::vector<Span> window;
  for (int i = 0; i < 5; ++i) {
    auto c = call("w" + std::to_string(i), "frontend-0", "product-1", "GetProduct", 100, "503");
    window.insert(window.end(), c.begin(), c.end());
  }
  EXPECT_EQ(detect_trace_alerts(window, model).size(), 1u);
}

TEST(TraceAlerts, UnknownPairFallsBackToGlobalSigma) {
  auto model = fit_trace_detector(training_calls(4));
  Issues issues;
  EXPECT_TRUE(detect_trace_alerts(call("w", "cart-0", "storage-1", "ReadKV", 100, "200"), model, &issues).empty());
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_EQ(issues[0].code, ErrorCode::UnknownPair);
  auto slow = detect_trace_alerts(call("w", "cart-0", "storage-1", "ReadKV", 5000, "200"), model);
  ASSERT_EQ(slow.size(), 1u);
  EXPECT_EQ(std::get<TracePayload>(slow[0].payload).abnormal_type, kPerformanceDegradation);
}

TEST(TraceAlerts, NoPairsIsAnError) {
  std::vector<Span> roots{{"t", "a", std::nullopt, "f", "f-0", "root", 0, 10, "200"}};
  try {
    fit_trace_detector(roots);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoInvocationPairs);
  }
}

TEST(TraceAlerts, DetectorJsonRoundTrip) {
  auto model = fit_trace_detector(training_calls(6));
  auto back = TraceDetector::from_json(model.to_json());
  PairKey key{"frontend-0", "product-1", "GetProduct"};
  for (double d : {90.0, 100.0, 120.0, 400.0}) EXPECT_EQ(back.score(key, {d, 1.0}), model.score(key, {d, 1.0}));
}

TEST(LogRules, BottomHalfByCount) {
  std::vector<LogTemplate> templates{{0, {"a"}, 100}, {1, {"b"}, 50}, {2, {"c"}, 2}, {3, {"d"}, 1}};
  std::map<int, std::int64_t> freq{{0, 100}, {1, 50}, {2, 2}, {3, 1}};
  EXPECT_EQ(select_log_alert_keys(freq, templates, {}).alert_keys, (std::set<int>{2, 3}));
}

TEST(LogRules, ErrorTemplateAlwaysIncluded) {
  std::vector<LogTemplate> templates{{0, {"disk", "error"}, 1'000'000}, {1, {"ok"}, 5}, {2, {"fine"}, 6}};
  std::map<int, std::int64_t> freq{{0, 1'000'000}, {1, 5}, {2, 6}};
  auto set = select_log_alert_keys(freq, templates, {});
  EXPECT_TRUE(set.alert_keys.count(0));
  auto by_level = select_log_alert_keys({{0, 9}, {1, 1}}, {{0, {"x"}, 9}, {1, {"y"}, 1}}, {0});
  EXPECT_TRUE(by_level.alert_keys.count(0));
}

TEST(LogRules, MatchesBruteForceUnion) {
  Rng rng(8);
  std::vector<std::string> words{"ok", "done", "error", "ready", "failed", "started", "Exception", "idle"};
  for (int trial = 0; trial < 300; ++trial) {
    int n = std::uniform_int_distribution<int>(1, 30)(rng);
    double k = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    std::vector<LogTemplate> templates;
    std::map<int, std::int64_t> freq;
    std::set<int> error_level;
    for (int i = 0; i < n; ++i) {
      std::int64_t c = std::uniform_int_distribution<std::int64_t>(1, 20)(rng);
      templates.push_back({i, {"job", words[std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng)]}, c});
      freq[i] = c;
      if (std::uniform_int_distribution<int>(0, 9)(rng) == 0) error_level.insert(i);
    }
    LogAlertConfig cfg;
    cfg.low_freq_fraction = k;
    std::set<int> expected;
    for (const auto& t : templates) {
      bool kw = false;
      for (const auto& w : cfg.error_keywords) kw = kw || t.text().find(w) != std::string::npos;
      if (kw || error_level.count(t.id)) expected.insert(t.id);
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return freq[a] < freq[b]; });
    auto take = static_cast<std::size_t>(std::ceil(k * n - 1e-9));
    for (std::size_t i = 0; i < take; ++i) expected.insert(order[i]);
    EXPECT_EQ(select_log_alert_keys(freq, templates, error_level, cfg).alert_keys, expected);
  }
}

TEST(LogRules, RuleTwoSizeWithoutErrors) {
  for (int n = 1; n <= 25; ++n) {
    std::vector<LogTemplate> templates;
    std::map<int, std::int64_t> freq;
    for (int i = 0; i < n; ++i) {
      templates.push_back({i, {"quiet"}, i + 1});
      freq[i] = i + 1;
    }
    EXPECT_EQ(select_log_alert_keys(freq, templates, {}).alert_keys.size(),
              static_cast<std::size_t>(std::ceil(0.5 * n)));
  }
}

namespace {

const std::vector<std::string> kVerbs{"alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf",
                                      "hotel", "india", "juliet", "kilo", "lima", "mike", "november"};

std::string message_for(std::size_t i) { return kVerbs[i] + " stage completed"; }

}  // namespace

TEST(LogAlerts, RepeatedKeyYieldsOneAlert) {
  DrainParser p;
  for (std::size_t i = 0; i < kVerbs.size(); ++i) ASSERT_EQ(p.parse(message_for(i)), static_cast<int>(i));
  LogAlertSet set;
  set.alert_keys = {13};
  std::vector<LogEntry> window;
  for (int i = 0; i < 7; ++i) window.push_back({"product-1", i, Level::parse("INFO"), message_for(13)});
  auto alerts = detect_log_alerts(window, p, set);
  ASSERT_EQ(alerts.size(), 1u);
  EXPECT_EQ(alerts[0].reporter_id, "product-1");
  EXPECT_EQ(std::get<LogPayload>(alerts[0].payload).log_key, 13);

  std::vector<LogEntry> quiet{{"product-1", 0, {}, message_for(2)}, {"cart-0", 1, {}, "never seen words here"}};
  EXPECT_TRUE(detect_log_alerts(quiet, p, set).empty());
}

TEST(LogAlerts, MatchesLinearScan) {
  DrainParser p;
  for (std::size_t i = 0; i < kVerbs.size(); ++i) p.parse(message_for(i));
  Rng rng(12);
  std::vector<std::string> instances{"a-0", "a-1", "b-0"};
  for (int trial = 0; trial < 50; ++trial) {
    LogAlertSet set;
    for (int k = 0; k < static_cast<int>(kVerbs.size()); ++k)
      if (std::uniform_int_distribution<int>(0, 2)(rng) == 0) set.alert_keys.insert(k);
    std::vector<LogEntry> window;
    std::set<std::pair<std::string, int>> expected;
    for (int i = 0; i < 40; ++i) {
      auto k = std::uniform_int_distribution<std::size_t>(0, kVerbs.size() - 1)(rng);
      auto inst = instances[std::uniform_int_distribution<std::size_t>(0, 2)(rng)];
      window.push_back({inst, i, {}, message_for(k)});
      if (set.alert_keys.count(static_cast<int>(k))) expected.emplace(inst, static_cast<int>(k));
    }
    std::set<std::pair<std::string, int>> got;
    for (const auto& a : detect_log_alerts(window, p, set)) got.emplace(a.reporter_id, std::get<LogPayload>(a.payload).log_key);
    EXPECT_EQ(got, expected);
  }
}

TEST(Alerts, JsonRoundTrip) {
  std::vector<Alert> alerts{{"cart-0", MetricPayload{"cpu_usage", Direction::Down}},
                            {"product-1", TracePayload{"frontend-0", "GetProduct", "500"}},
                            {"product-1", LogPayload{13}}};
  for (const auto& a : alerts) EXPECT_EQ(json(a).get<Alert>(), a);
  EXPECT_EQ(json(alerts[1]).dump(),
            R"({"abnormal":"500","modality":"trace","operation":"GetProduct","parent":"frontend-0","reporter":"product-1"})");
}

TEST(Extractors, BundleRoundTripAndDeterminism) {
  SimulationConfig cfg;
  cfg.duration_ms = 20 * 60'000;
  cfg.seed = 3;
  auto topo = desk_topology();
  FaultSpec fault{FaultType::PacketLoss, "cart-1", cfg.start_ts + 14 * 60'000, 5 * 60'000, 0.9};
  auto out = generate(topo, cfg, {fault});
  TelemetryBundle all{out.metrics, out.spans, out.logs};
  TimeWindow train{cfg.start_ts, fault.start_ts};
  TimeWindow test{fault.start_ts, fault.start_ts + fault.duration_ms};
  auto clean = all.slice(train);
  ExtractorConfig ec;
  ec.trace.seed = 17;
  auto bundle = ExtractorBundle::fit(clean, clean.logs, ec);
  auto again = ExtractorBundle::fit(clean, clean.logs, ec);
  auto window = all.slice(test);
  auto alerts = bundle.extract(window);
  EXPECT_EQ(alerts, again.extract(window));
  EXPECT_EQ(bundle.fingerprint(), again.fingerprint());

  auto restored = ExtractorBundle::from_json(bundle.to_json());
  EXPECT_EQ(restored.fingerprint(), bundle.fingerprint());
  EXPECT_EQ(restored.extract(window), alerts);

  std::set<std::string> seen;
  for (const auto& m : window.metrics) seen.insert(m.instance_id);
  for (const auto& s : window.spans) seen.insert(s.instance_id);
  for (const auto& l : window.logs) seen.insert(l.instance_id);
  for (const auto& a : alerts) EXPECT_TRUE(seen.count(a.reporter_id)) << a.reporter_id;
  bool root_alerted = false;
  for (const auto& a : alerts) root_alerted = root_alerted || a.reporter_id == "cart-1";
  EXPECT_TRUE(root_alerted);
}
