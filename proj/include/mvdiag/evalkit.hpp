#pragma once

// Ranking and classification metrics, plus inter-task affinity.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvdiag/common.hpp"
#include "mvdiag/model.hpp"

namespace mvdiag {

struct RclResult {
  std::vector<std::string> ranking;
  std::string truth;
};

struct FtiResult {
  int predicted = 0;
  int truth = 0;
};

namespace detail {
/// 1-based position of the truth, 0 when absent.
inline std::size_t rank_of(const RclResult& r) {
  auto it = std::find(r.ranking.begin(), r.ranking.end(), r.truth);
  return it == r.ranking.end() ? 0 : static_cast<std::size_t>(it - r.ranking.begin()) + 1;
}

inline void require_k(int k) {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
}
}  // namespace detail

inline double hr_at_k(const std::vector<RclResult>& results, int k) {
  detail::require_k(k);
  if (results.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& r : results) {
    auto rank = detail::rank_of(r);
    if (rank != 0 && rank <= static_cast<std::size_t>(k)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

inline double avg_at_k(const std::vector<RclResult>& results, int k) {
  detail::require_k(k);
  double total = 0.0;
  for (int i = 1; i <= k; ++i) total += hr_at_k(results, i);
  return total / static_cast<double>(k);
}

inline double mrr_at_k(const std::vector<RclResult>& results, int k) {
  detail::require_k(k);
  if (results.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : results) {
    auto rank = detail::rank_of(r);
    if (rank != 0 && rank <= static_cast<std::size_t>(k)) total += 1.0 / static_cast<double>(rank);
  }
  return total / static_cast<double>(results.size());
}

enum class Averaging { Macro, Micro };

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Macro averages per-class P, R and F1 over every class that occurs as a
/// truth or a prediction; a class with no predictions has precision 0.
/// Micro pools TP/FP/FN across classes.
inline Prf prf1(const std::vector<FtiResult>& results, Averaging averaging = Averaging::Macro) {
  if (results.empty()) throw Error(ErrorCode::InvalidArgument, "no results to score");
  struct Counts {
    long tp = 0, fp = 0, fn = 0;
  };
  std::map<int, Counts> classes;
  for (const auto& r : results) {
    if (r.predicted == r.truth) {
      ++classes[r.truth].tp;
    } else {
      ++classes[r.predicted].fp;
      ++classes[r.truth].fn;
    }
  }
  auto ratio = [](long a, long b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  auto harmonic = [](double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); };
  if (averaging == Averaging::Micro) {
    Counts sum;
    for (const auto& [c, n] : classes) {
      sum.tp += n.tp;
      sum.fp += n.fp;
      sum.fn += n.fn;
    }
    double p = ratio(sum.tp, sum.tp + sum.fp);
    double r = ratio(sum.tp, sum.tp + sum.fn);
    return {p, r, harmonic(p, r)};
  }
  Prf out;
  for (const auto& [c, n] : classes) {
    double p = ratio(n.tp, n.tp + n.fp);
    double r = ratio(n.tp, n.tp + n.fn);
    out.precision += p;
    out.recall += r;
    out.f1 += harmonic(p, r);
  }
  const auto k = static_cast<double>(classes.size());
  return {out.precision / k, out.recall / k, out.f1 / k};
}

struct EvaluationSummary {
  double hr1 = 0, hr3 = 0, avg3 = 0, mrr3 = 0;
  Prf prf;
  std::size_t cases = 0;
};

inline EvaluationSummary summarize(const std::vector<RclResult>& rcl, const std::vector<FtiResult>& fti,
                                   Averaging averaging = Averaging::Macro) {
  EvaluationSummary s;
  s.cases = rcl.size();
  s.hr1 = hr_at_k(rcl, 1);
  s.hr3 = hr_at_k(rcl, 3);
  s.avg3 = avg_at_k(rcl, 3);
  s.mrr3 = mrr_at_k(rcl, 3);
  if (!fti.empty()) s.prf = prf1(fti, averaging);
  return s;
}

inline json summary_to_json(const EvaluationSummary& s) {
  return {{"HR@1", s.hr1},        {"HR@3", s.hr3},           {"Avg@3", s.avg3}, {"MRR@3", s.mrr3},
          {"precision", s.prf.precision}, {"recall", s.prf.recall}, {"F1", s.prf.f1},  {"cases", s.cases}};
}

// ---------------------------------------------------------------------------
// Inter-task affinity

enum class Task { Rcl, Fti };

/// Z = 1 - L_T2(shared after one step on T1) / L_T2(shared before). The step
/// is plain gradient descent with `step_size` on the encoder parameters only.
inline double inter_task_affinity(const Model& model, const GraphBatch& batch, Task t1, Task t2,
                                  double step_size = 1e-3) {
  auto task_loss = [&](Model& m, Task task, bool with_grad) {
    auto run = [&](Model::Binding& bind, Tape& tape) {
      auto f = m.forward(bind, batch);
      Var loss = task == Task::Rcl ? ag::segment_softmax_xent(f.rcl_scores, batch.offsets, batch.roots)
                                   : ag::softmax_xent(f.fti_logits, batch.types);
      if (with_grad) tape.backward(loss);
      return loss.scalar();
    };
    Tape tape;
    if (with_grad) {
      Model::Binding bind(tape, m);
      return run(bind, tape);
    }
    Model::Binding bind(tape, static_cast<const Model&>(m));
    return run(bind, tape);
  };
  Model work = model;
  double before = task_loss(work, t2, false);
  if (before < 1e-12) throw Error(ErrorCode::ZeroLoss, "target-task loss is zero before the update");
  work.zero_grad();
  task_loss(work, t1, true);
  for (auto& p : work.params())
    if (work.is_shared(p.name)) p.value -= step_size * p.grad;
  double after = task_loss(work, t2, false);
  return 1.0 - after / before;
}

}  // namespace mvdiag
