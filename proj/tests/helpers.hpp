#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include "mvdiag/dataset.hpp"

namespace mvdiag::testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mvdiag-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

/// Random connected graph (a random tree plus a few extra edges) with
/// gaussian features of width d.
inline FailureSample random_sample(Rng& rng, int nodes, int d, int classes, const std::string& id = "s") {
  FailureSample s;
  s.case_id = id;
  for (int i = 0; i < nodes; ++i) s.graph.nodes.push_back("n" + std::to_string(i));
  std::set<std::pair<int, int>> edges;
  for (int i = 1; i < nodes; ++i) {
    int p = std::uniform_int_distribution<int>(0, i - 1)(rng);
    edges.emplace(p, i);
    edges.emplace(i, p);
  }
  for (int k = 0; k < nodes / 3; ++k) {
    int a = std::uniform_int_distribution<int>(0, nodes - 1)(rng);
    int b = std::uniform_int_distribution<int>(0, nodes - 1)(rng);
    if (a == b) continue;
    edges.emplace(a, b);
    edges.emplace(b, a);
  }
  s.graph.edges.assign(edges.begin(), edges.end());
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& f : s.features) {
    f.resize(nodes, d);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = g(rng);
  }
  s.root_cause = std::uniform_int_distribution<int>(0, nodes - 1)(rng);
  s.failure_type = std::uniform_int_distribution<int>(0, classes - 1)(rng);
  s.node_map.resize(static_cast<std::size_t>(nodes));
  for (int i = 0; i < nodes; ++i) s.node_map[static_cast<std::size_t>(i)] = i;
  return s;
}

}  // namespace mvdiag::testutil
