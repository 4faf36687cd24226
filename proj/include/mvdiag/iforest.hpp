#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "mvdiag/common.hpp"

namespace mvdiag {

/// Expected path length of an unsuccessful BST search over n points; the
/// normalizer of the isolation-forest anomaly score.
inline double average_path_length(double n) {
  if (n <= 1.0) return 0.0;
  if (n == 2.0) return 1.0;
  constexpr double kEulerGamma = 0.5772156649015329;
  double harmonic = std::log(n - 1.0) + kEulerGamma;
  return 2.0 * harmonic - 2.0 * (n - 1.0) / n;
}

template <std::size_t Dim>
class IsolationTree {
 public:
  using Point = std::array<double, Dim>;

  struct Node {
    int feature = -1;  // -1 marks a leaf
    double split = 0.0;
    int left = -1;
    int right = -1;
    int size = 0;
  };

  IsolationTree() = default;

  IsolationTree(std::span<const Point> points, int height_limit, Rng& rng) {
    std::vector<int> index(points.size());
    std::iota(index.begin(), index.end(), 0);
    build(points, index, 0, static_cast<int>(index.size()), 0, height_limit, rng);
  }

  /// Edges from the root to the leaf isolating `x`, plus the average-path
  /// correction for points left unsplit in that leaf.
  double path_length(const Point& x) const {
    int node = 0;
    int depth = 0;
    while (nodes_[static_cast<std::size_t>(node)].feature >= 0) {
      const auto& n = nodes_[static_cast<std::size_t>(node)];
      node = x[static_cast<std::size_t>(n.feature)] < n.split ? n.left : n.right;
      ++depth;
    }
    return depth + average_path_length(nodes_[static_cast<std::size_t>(node)].size);
  }

  int height() const { return height_of(0); }
  const std::vector<Node>& nodes() const { return nodes_; }

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& n : nodes_) out.push_back({n.feature, n.split, n.left, n.right, n.size});
    return out;
  }

  static IsolationTree from_json(const nlohmann::json& j) {
    IsolationTree tree;
    for (const auto& row : j) {
      tree.nodes_.push_back({row.at(0).get<int>(), row.at(1).get<double>(), row.at(2).get<int>(),
                             row.at(3).get<int>(), row.at(4).get<int>()});
    }
    return tree;
  }

  /// Hand-assembled tree, for tests and deserialization.
  static IsolationTree from_nodes(std::vector<Node> nodes) {
    IsolationTree tree;
    tree.nodes_ = std::move(nodes);
    return tree;
  }

 private:
  int build(std::span<const Point> points, std::vector<int>& index, int begin, int end, int depth, int limit,
            Rng& rng) {
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back({-1, 0.0, -1, -1, end - begin});
    if (end - begin <= 1 || depth >= limit) return id;

    // Only features that still vary inside this node can split it.
    std::array<double, Dim> lo{};
    std::array<double, Dim> hi{};
    lo.fill(INFINITY);
    hi.fill(-INFINITY);
    for (int i = begin; i < end; ++i) {
      const auto& p = points[static_cast<std::size_t>(index[static_cast<std::size_t>(i)])];
      for (std::size_t d = 0; d < Dim; ++d) {
        lo[d] = std::min(lo[d], p[d]);
        hi[d] = std::max(hi[d], p[d]);
      }
    }
    std::vector<std::size_t> candidates;
    for (std::size_t d = 0; d < Dim; ++d) {
      if (hi[d] > lo[d]) candidates.push_back(d);
    }
    if (candidates.empty()) return id;

    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    std::size_t feature = candidates[pick(rng)];
    std::uniform_real_distribution<double> between(lo[feature], hi[feature]);
    double split = between(rng);
    if (split <= lo[feature]) split = std::nextafter(lo[feature], hi[feature]);

    auto mid = std::partition(index.begin() + begin, index.begin() + end, [&](int i) {
      return points[static_cast<std::size_t>(i)][feature] < split;
    });
    int cut = static_cast<int>(mid - index.begin());
    int left = build(points, index, begin, cut, depth + 1, limit, rng);
    int right = build(points, index, cut, end, depth + 1, limit, rng);
    auto& node = nodes_[static_cast<std::size_t>(id)];
    node.feature = static_cast<int>(feature);
    node.split = split;
    node.left = left;
    node.right = right;
    return id;
  }

  int height_of(int node) const {
    const auto& n = nodes_[static_cast<std::size_t>(node)];
    if (n.feature < 0) return 0;
    return 1 + std::max(height_of(n.left), height_of(n.right));
  }

  std::vector<Node> nodes_;
};

template <std::size_t Dim>
class IsolationForest {
 public:
  using Point = std::array<double, Dim>;

  IsolationForest() = default;

  /// Each tree sees min(subsample_size, n) points drawn without replacement;
  /// trees are height-limited to ceil(log2(that sample size)).
  IsolationForest(std::span<const Point> points, int tree_count, int subsample_size, Rng& rng) {
    if (points.empty()) throw Error(ErrorCode::InsufficientData, "isolation forest needs at least one point");
    if (tree_count < 1 || subsample_size < 1)
      throw Error(ErrorCode::InvalidConfig, "isolation forest needs tree_count >= 1 and subsample_size >= 1");
    sample_size_ = std::min<int>(subsample_size, static_cast<int>(points.size()));
    int limit = sample_size_ <= 1 ? 0 : static_cast<int>(std::ceil(std::log2(static_cast<double>(sample_size_))));
    std::vector<int> order(points.size());
    std::vector<Point> sample(static_cast<std::size_t>(sample_size_));
    trees_.reserve(static_cast<std::size_t>(tree_count));
    for (int t = 0; t < tree_count; ++t) {
      std::iota(order.begin(), order.end(), 0);
      for (int i = 0; i < sample_size_; ++i) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), order.size() - 1);
        std::swap(order[static_cast<std::size_t>(i)], order[pick(rng)]);
        sample[static_cast<std::size_t>(i)] = points[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      }
      trees_.emplace_back(std::span<const Point>(sample), limit, rng);
    }
  }

  /// s(x) = 2^(-E[h(x)] / c(sample_size)); 0.5 for a point indistinguishable
  /// from the training mass, approaching 1 for easily isolated points.
  double score(const Point& x) const {
    if (trees_.empty()) return 0.5;
    double total = 0.0;
    for (const auto& tree : trees_) total += tree.path_length(x);
    double mean = total / static_cast<double>(trees_.size());
    double c = average_path_length(sample_size_);
    if (c <= 0.0) return 0.5;
    return std::pow(2.0, -mean / c);
  }

  int sample_size() const { return sample_size_; }
  const std::vector<IsolationTree<Dim>>& trees() const { return trees_; }

  nlohmann::json to_json() const {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : trees_) trees.push_back(t.to_json());
    return {{"sample_size", sample_size_}, {"trees", trees}};
  }

  static IsolationForest from_json(const nlohmann::json& j) {
    IsolationForest forest;
    forest.sample_size_ = j.at("sample_size").get<int>();
    for (const auto& t : j.at("trees")) forest.trees_.push_back(IsolationTree<Dim>::from_json(t));
    return forest;
  }

  static IsolationForest from_trees(std::vector<IsolationTree<Dim>> trees, int sample_size) {
    IsolationForest forest;
    forest.trees_ = std::move(trees);
    forest.sample_size_ = sample_size;
    return forest;
  }

 private:
  std::vector<IsolationTree<Dim>> trees_;
  int sample_size_ = 0;
};

}  // namespace mvdiag
