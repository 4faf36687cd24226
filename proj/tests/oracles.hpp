#pragma once

// Direct, loop-by-loop evaluations of the losses, metrics and Shapley values.
// Written from the defining formulas without reusing library code paths.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mvdiag::oracle {

inline double cos_sim(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double na = std::sqrt(a.dot(a)), nb = std::sqrt(b.dot(b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

inline double phi(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double tau) { return std::exp(cos_sim(a, b) / tau); }

inline Eigen::VectorXd row(const Eigen::MatrixXd& m, Eigen::Index i) { return m.row(i).transpose(); }

/// Supervised contrastive term of one modality: anchors with positives only.
inline double supcon(const Eigen::MatrixXd& f, const std::vector<int>& keys, double tau) {
  const auto n = static_cast<std::size_t>(f.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      (keys[j] == keys[i] ? pos : neg).push_back(j);
    }
    if (pos.empty()) continue;
    double term = 0.0;
    for (auto j : pos) {
      double num = phi(row(f, static_cast<Eigen::Index>(i)), row(f, static_cast<Eigen::Index>(j)), tau);
      double den = num;
      for (auto z : neg) den += phi(row(f, static_cast<Eigen::Index>(i)), row(f, static_cast<Eigen::Index>(z)), tau);
      term += std::log(num / den);
    }
    total += -term / static_cast<double>(pos.size());
  }
  return total;
}

/// Metric and trace keyed by root, log keyed by type.
inline double task_oriented(const std::array<Eigen::MatrixXd, 3>& f, const std::vector<std::string>& roots,
                            const std::vector<int>& types, double tau) {
  std::map<std::string, int> ids;
  std::vector<int> root_keys;
  for (const auto& r : roots) root_keys.push_back(ids.emplace(r, static_cast<int>(ids.size())).first->second);
  return supcon(f[0], root_keys, tau) + supcon(f[1], root_keys, tau) + supcon(f[2], types, tau);
}

/// l(A_i, B_i) for every i, summed, in both directions, over 2n.
inline double pair_term(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double tau) {
  const Eigen::Index n = a.rows();
  auto l = [&](const Eigen::MatrixXd& self, const Eigen::MatrixXd& other, Eigen::Index i) {
    double num = phi(row(self, i), row(other, i), tau);
    double den = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k != i) den += phi(row(self, i), row(self, k), tau);
      den += phi(row(self, i), row(other, k), tau);
    }
    return -std::log(num / den);
  };
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) total += l(a, b, i) + l(b, a, i);
  return total / (2.0 * static_cast<double>(n));
}

inline double cross_modal(const std::array<Eigen::MatrixXd, 3>& f, double tau) {
  return pair_term(f[0], f[1], tau) + pair_term(f[0], f[2], tau);
}

inline double cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double z = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) z += std::exp(logits(r, c));
    total += -std::log(std::exp(logits(r, labels[static_cast<std::size_t>(r)])) / z);
  }
  return total / static_cast<double>(logits.rows());
}

inline double node_cross_entropy(const std::vector<Eigen::VectorXd>& scores, const std::vector<int>& roots) {
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double z = 0.0;
    for (Eigen::Index k = 0; k < scores[i].size(); ++k) z += std::exp(scores[i](k));
    total += -std::log(std::exp(scores[i](roots[i])) / z);
  }
  return total / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// Ranking and classification

struct Case {
  std::vector<std::string> ranking;
  std::string truth;
};

/// 1-based rank by scanning, 0 if absent.
inline std::size_t scan_rank(const Case& c) {
  for (std::size_t i = 0; i < c.ranking.size(); ++i)
    if (c.ranking[i] == c.truth) return i + 1;
  return 0;
}

inline double hr(const std::vector<Case>& cases, int k) {
  if (cases.empty()) return 0.0;
  double hits = 0;
  for (const auto& c : cases) {
    bool hit = false;
    for (int i = 0; i < k && i < static_cast<int>(c.ranking.size()); ++i) hit = hit || c.ranking[static_cast<std::size_t>(i)] == c.truth;
    hits += hit ? 1 : 0;
  }
  return hits / static_cast<double>(cases.size());
}

inline double avg(const std::vector<Case>& cases, int k) {
  double s = 0.0;
  for (int i = 1; i <= k; ++i) s += hr(cases, i);
  return s / k;
}

inline double mrr(const std::vector<Case>& cases, int k) {
  if (cases.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : cases) {
    auto r = scan_rank(c);
    if (r >= 1 && r <= static_cast<std::size_t>(k)) s += 1.0 / static_cast<double>(r);
  }
  return s / static_cast<double>(cases.size());
}

/// Macro P/R/F1 from a full confusion matrix over classes that occur.
inline std::array<double, 3> macro_prf(const std::vector<std::pair<int, int>>& pred_truth, int classes) {
  std::vector<std::vector<long>> cm(static_cast<std::size_t>(classes), std::vector<long>(static_cast<std::size_t>(classes), 0));
  for (const auto& [p, t] : pred_truth) ++cm[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  double P = 0, R = 0, F = 0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    long tp = cm[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
    long predicted = 0, actual = 0;
    for (int o = 0; o < classes; ++o) {
      predicted += cm[static_cast<std::size_t>(o)][static_cast<std::size_t>(c)];
      actual += cm[static_cast<std::size_t>(c)][static_cast<std::size_t>(o)];
    }
    if (predicted == 0 && actual == 0) continue;
    ++present;
    double p = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
    double r = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
    P += p;
    R += r;
    F += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  return {P / present, R / present, F / present};
}

// ---------------------------------------------------------------------------
// Shapley by enumerating all 3! player orders

inline std::array<double, 3> shapley_by_orders(const std::function<double(const std::array<bool, 3>&)>& v) {
  std::array<int, 3> order{0, 1, 2};
  std::array<double, 3> phi{};
  int count = 0;
  do {
    std::array<bool, 3> present{false, false, false};
    for (int p : order) {
      double before = v(present);
      present[static_cast<std::size_t>(p)] = true;
      phi[static_cast<std::size_t>(p)] += v(present) - before;
    }
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  for (auto& x : phi) x /= count;
  return phi;
}

}  // namespace mvdiag::oracle
