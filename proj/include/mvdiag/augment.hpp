#pragma once

// Graph augmentation: drop m = floor(p * |V|) non-root nodes.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mvdiag/common.hpp"
#include "mvdiag/dataset.hpp"

namespace mvdiag {

struct AugmentConfig {
  double inactivation_probability = 0.2;
  int copies_per_sample = 1;
  std::uint64_t seed = 0;
};

inline int nodes_to_drop(double p, int node_count) {
  // The epsilon keeps floor(0.2 * 10) at 2 despite 0.2 not being exact.
  int m = static_cast<int>(std::floor(p * static_cast<double>(node_count) + 1e-9));
  return std::clamp(m, 0, std::max(0, node_count - 1));
}

/// Removes m uniformly chosen non-root nodes with their edges and repacks
/// indices. When m is 0 an unmodified copy (augmented=false) is returned and
/// NothingToDrop is reported.
inline FailureSample augment(const FailureSample& sample, const AugmentConfig& cfg, Rng& rng,
                             Issues* issues = nullptr) {
  if (!(cfg.inactivation_probability >= 0.0 && cfg.inactivation_probability < 1.0))
    throw Error(ErrorCode::InvalidConfig, "inactivation probability must be in [0,1)");
  const int n = sample.node_count();
  if (sample.root_cause < 0 || sample.root_cause >= n)
    throw Error(ErrorCode::RootIndexInvalid, "augmentation needs a labeled root cause");
  int m = nodes_to_drop(cfg.inactivation_probability, n);
  if (m == 0) {
    report(issues, ErrorCode::NothingToDrop, sample.case_id);
    return sample;
  }

  std::vector<int> candidates;
  for (int i = 0; i < n; ++i)
    if (i != sample.root_cause) candidates.push_back(i);
  // Partial Fisher-Yates: the first m entries are a uniform m-subset.
  for (int i = 0; i < m; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(candidates.size()) - 1);
    std::swap(candidates[static_cast<std::size_t>(i)], candidates[static_cast<std::size_t>(pick(rng))]);
  }
  std::vector<bool> dropped(static_cast<std::size_t>(n), false);
  for (int i = 0; i < m; ++i) dropped[static_cast<std::size_t>(candidates[static_cast<std::size_t>(i)])] = true;

  std::vector<int> remap(static_cast<std::size_t>(n), -1);
  FailureSample out;
  out.case_id = sample.case_id;
  out.failure_type = sample.failure_type;
  out.augmented = true;
  for (int i = 0; i < n; ++i) {
    if (dropped[static_cast<std::size_t>(i)]) continue;
    remap[static_cast<std::size_t>(i)] = static_cast<int>(out.graph.nodes.size());
    out.graph.nodes.push_back(sample.graph.nodes[static_cast<std::size_t>(i)]);
    out.node_map.push_back(sample.node_map.empty() ? i : sample.node_map[static_cast<std::size_t>(i)]);
  }
  for (const auto& [a, b] : sample.graph.edges) {
    int na = remap[static_cast<std::size_t>(a)];
    int nb = remap[static_cast<std::size_t>(b)];
    if (na >= 0 && nb >= 0) out.graph.edges.emplace_back(na, nb);
  }
  std::sort(out.graph.edges.begin(), out.graph.edges.end());
  for (std::size_t mod = 0; mod < 3; ++mod) {
    out.features[mod].resize(static_cast<Eigen::Index>(out.graph.nodes.size()), sample.features[mod].cols());
    for (int i = 0; i < n; ++i) {
      int j = remap[static_cast<std::size_t>(i)];
      if (j >= 0) out.features[mod].row(j) = sample.features[mod].row(i);
    }
  }
  out.root_cause = remap[static_cast<std::size_t>(sample.root_cause)];
  return out;
}

/// Originals followed by `copies_per_sample` augmented copies of each, drawn
/// from per-sample streams of the augment seed.
inline std::vector<FailureSample> augment_dataset(const std::vector<FailureSample>& samples,
                                                  const AugmentConfig& cfg, Issues* issues = nullptr) {
  std::vector<FailureSample> out = samples;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng(derive_seed(derive_seed(cfg.seed, "augment"), static_cast<std::uint64_t>(i)));
    for (int c = 0; c < cfg.copies_per_sample; ++c) {
      auto copy = augment(samples[i], cfg, rng, issues);
      if (copy.augmented) out.push_back(std::move(copy));
    }
  }
  return out;
}

}  // namespace mvdiag
