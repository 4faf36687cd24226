#pragma once

// Online diagnosis: window telemetry -> alerts -> features -> ranked root
// causes, failure type, and exact 3-player Shapley attribution per task.

#include <algorithm>
#include <array>
#include <chrono>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvdiag/alerts.hpp"
#include "mvdiag/dataset.hpp"
#include "mvdiag/model.hpp"
#include "mvdiag/train.hpp"

namespace mvdiag {

/// Coalition over {metric, trace, log}: bit m set means modality m present.
using Coalition = std::array<bool, 3>;
using ValueFunction = std::function<double(const Coalition&)>;

/// Exact Shapley values: phi_i = sum over S not containing i of
/// |S|! (n - |S| - 1)! / n! * (v(S + i) - v(S)), with n = 3.
inline std::array<double, 3> modality_shapley(const ValueFunction& value) {
  std::array<double, 8> v{};
  for (int mask = 0; mask < 8; ++mask) v[static_cast<std::size_t>(mask)] = value({(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0});
  static constexpr double kWeight[3] = {2.0 / 6.0, 1.0 / 6.0, 2.0 / 6.0};  // |S| = 0, 1, 2
  std::array<double, 3> phi{};
  for (int i = 0; i < 3; ++i) {
    for (int mask = 0; mask < 8; ++mask) {
      if (mask & (1 << i)) continue;
      int size = __builtin_popcount(static_cast<unsigned>(mask));
      phi[static_cast<std::size_t>(i)] +=
          kWeight[size] * (v[static_cast<std::size_t>(mask | (1 << i))] - v[static_cast<std::size_t>(mask)]);
    }
  }
  return phi;
}

struct Prediction {
  std::vector<double> node_probs;   // per graph node
  std::vector<double> class_probs;  // per failure type
  Matrix fused_nodes;               // E_v rows
  Matrix fused_graph;               // 1 x 3*d_out
};

namespace detail {
inline std::vector<double> softmax(const Eigen::Ref<const Eigen::VectorXd>& x) {
  double m = x.maxCoeff();
  Eigen::VectorXd e = (x.array() - m).exp().matrix();
  e /= e.sum();
  return {e.data(), e.data() + e.size()};
}
}  // namespace detail

/// Forward pass for each sample, batched `chunk` samples at a time.
inline std::vector<Prediction> predict(const Model& model, const std::vector<const FailureSample*>& samples,
                                       std::size_t chunk = 64) {
  std::vector<Prediction> out;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<const FailureSample*> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                           samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), start + chunk)));
    auto batch = make_batch(part);
    Tape tape;
    Model::Binding bind(tape, model);
    auto f = model.forward(bind, batch);
    for (int s = 0; s < batch.size(); ++s) {
      Prediction p;
      int begin = batch.offsets[static_cast<std::size_t>(s)];
      int count = batch.offsets[static_cast<std::size_t>(s) + 1] - begin;
      p.node_probs = detail::softmax(f.rcl_scores.value().block(begin, 0, count, 1));
      p.class_probs = detail::softmax(f.fti_logits.value().row(s).transpose());
      p.fused_nodes = f.fused_nodes.value().middleRows(begin, count);
      p.fused_graph = f.fused_graph.value().row(s);
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline Prediction predict(const Model& model, const FailureSample& sample) { return predict(model, {&sample}).at(0); }

/// Node indices by descending probability, ties by instance id.
inline std::vector<int> rank_nodes(const std::vector<double>& probs, const std::vector<std::string>& names) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    auto pa = probs[static_cast<std::size_t>(a)];
    auto pb = probs[static_cast<std::size_t>(b)];
    if (pa != pb) return pa > pb;
    return names[static_cast<std::size_t>(a)] < names[static_cast<std::size_t>(b)];
  });
  return order;
}

inline int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

namespace detail {
inline Matrix mask_blocks(const Matrix& fused, const Coalition& keep, Eigen::Index width) {
  Matrix out = fused;
  for (Eigen::Index m = 0; m < 3; ++m)
    if (!keep[static_cast<std::size_t>(m)]) out.middleCols(m * width, width).setZero();
  return out;
}
}  // namespace detail

/// FTI: probability of the predicted class with absent modalities' graph
/// blocks zeroed. RCL: softmax probability of the top node with absent
/// modalities' node blocks zeroed.
inline std::array<std::array<double, 3>, 2> explain(const Model& model, const Prediction& p) {
  const Eigen::Index width = model.config().output_dim;
  const int predicted = argmax(p.class_probs);
  const int top = argmax(p.node_probs);
  auto fti_value = [&](const Coalition& keep) {
    Tape tape;
    Model::Binding bind(tape, model);
    Var logits = model.fti_head(bind, tape.constant(detail::mask_blocks(p.fused_graph, keep, width)));
    return detail::softmax(logits.value().row(0).transpose())[static_cast<std::size_t>(predicted)];
  };
  auto rcl_value = [&](const Coalition& keep) {
    Tape tape;
    Model::Binding bind(tape, model);
    Var scores = model.rcl_head(bind, tape.constant(detail::mask_blocks(p.fused_nodes, keep, width)));
    return detail::softmax(scores.value().col(0))[static_cast<std::size_t>(top)];
  };
  return {modality_shapley(rcl_value), modality_shapley(fti_value)};
}

struct DiagnosisReport {
  std::vector<std::pair<std::string, double>> ranking;
  std::string failure_type;
  double failure_probability = 0.0;
  std::vector<std::string> type_names;
  std::vector<double> class_probs;
  std::array<double, 3> shap_rcl{};
  std::array<double, 3> shap_fti{};
  std::map<std::string, double> timing_ms;
};

inline json report_to_json(const DiagnosisReport& r, bool with_timing = true) {
  json ranking = json::array();
  for (const auto& [id, p] : r.ranking) ranking.push_back({id, p});
  auto shap = [](const std::array<double, 3>& v) {
    return json{{"metric", v[0]}, {"trace", v[1]}, {"log", v[2]}};
  };
  json out{{"ranking", ranking},
           {"failure_type", {r.failure_type, r.failure_probability}},
           {"failure_types", r.type_names},
           {"class_probs", r.class_probs},
           {"shap", {{"rcl", shap(r.shap_rcl)}, {"fti", shap(r.shap_fti)}}}};
  if (with_timing) out["timing_ms"] = r.timing_ms;
  return out;
}

class Diagnoser {
 public:
  /// Refuses a checkpoint trained against different extractors.
  Diagnoser(const Checkpoint& checkpoint, const ExtractorBundle& extractors)
      : checkpoint_(checkpoint), extractors_(extractors) {
    if (checkpoint.extractor_fingerprint != extractors.fingerprint())
      throw Error(ErrorCode::ChecksumMismatch, "checkpoint was trained with different extractors");
  }

  DiagnosisReport diagnose(const TelemetryBundle& window, Issues* issues = nullptr) const {
    using Clock = std::chrono::steady_clock;
    auto ms = [](Clock::time_point a, Clock::time_point b) {
      return std::chrono::duration<double, std::milli>(b - a).count();
    };
    auto t0 = Clock::now();
    TelemetryBundle canonical = window;
    canonicalize(canonical);
    auto graph = build_graph(canonical.spans);
    auto alerts = extractors_.extract(canonical, issues);
    auto t1 = Clock::now();
    auto sample = build_sample(graph, alerts, checkpoint_.table, std::nullopt, checkpoint_.type_names);
    auto t2 = Clock::now();
    auto prediction = predict(checkpoint_.model, sample);
    auto t3 = Clock::now();
    auto shap = explain(checkpoint_.model, prediction);
    auto t4 = Clock::now();

    DiagnosisReport report;
    for (int v : rank_nodes(prediction.node_probs, graph.nodes))
      report.ranking.emplace_back(graph.nodes[static_cast<std::size_t>(v)], prediction.node_probs[static_cast<std::size_t>(v)]);
    int type = argmax(prediction.class_probs);
    report.type_names = checkpoint_.type_names;
    report.failure_type = checkpoint_.type_names.at(static_cast<std::size_t>(type));
    report.failure_probability = prediction.class_probs[static_cast<std::size_t>(type)];
    report.class_probs = prediction.class_probs;
    report.shap_rcl = shap[0];
    report.shap_fti = shap[1];
    report.timing_ms = {{"alerts", ms(t0, t1)},
                        {"features", ms(t1, t2)},
                        {"inference", ms(t2, t3)},
                        {"shap", ms(t3, t4)},
                        {"total", ms(t0, t4)}};
    return report;
  }

 private:
  const Checkpoint& checkpoint_;
  const ExtractorBundle& extractors_;
};

}  // namespace mvdiag
