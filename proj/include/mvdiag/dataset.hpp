#pragma once

// Labeled failure samples: the instance correlation graph from traces, alert
// tokens grouped by reporter, and per-modality alert embeddings.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mvdiag/alerts.hpp"
#include "mvdiag/common.hpp"
#include "mvdiag/telemetry.hpp"

namespace mvdiag {

struct InstanceGraph {
  std::vector<std::string> nodes;
  std::vector<std::pair<int, int>> edges;  // directed, both directions present, sorted, unique

  int size() const { return static_cast<int>(nodes.size()); }

  std::optional<int> index_of(const std::string& instance) const {
    auto it = std::find(nodes.begin(), nodes.end(), instance);
    if (it == nodes.end()) return std::nullopt;
    return static_cast<int>(it - nodes.begin());
  }

  /// Ascending neighbour indices of each node.
  std::vector<std::vector<int>> adjacency() const {
    std::vector<std::vector<int>> adj(nodes.size());
    for (const auto& [a, b] : edges) adj[static_cast<std::size_t>(a)].push_back(b);
    for (auto& n : adj) std::sort(n.begin(), n.end());
    return adj;
  }

  bool operator==(const InstanceGraph&) const = default;
};

/// Nodes in first-appearance order; one undirected edge (stored both ways)
/// per parented invocation, self-calls excluded.
inline InstanceGraph build_graph(const std::vector<Span>& spans) {
  if (spans.empty()) throw Error(ErrorCode::EmptyTraces, "no spans in window");
  InstanceGraph g;
  std::unordered_map<std::string, int> index;
  for (const auto& s : spans) {
    if (index.emplace(s.instance_id, static_cast<int>(g.nodes.size())).second) g.nodes.push_back(s.instance_id);
  }
  std::set<std::pair<int, int>> edges;
  for (const auto& inv : extract_invocations(spans)) {
    int p = index.at(inv.caller_instance);
    int c = index.at(inv.callee_instance);
    if (p == c) continue;
    edges.emplace(p, c);
    edges.emplace(c, p);
  }
  g.edges.assign(edges.begin(), edges.end());
  return g;
}

// ---------------------------------------------------------------------------
// Alert tokens

namespace detail {
inline std::string escape_field(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '|' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}
}  // namespace detail

/// Modality-tagged, '|'-joined alert fields without the reporter, e.g.
/// "M|cpu_usage|up", "T|frontend-0|GetProduct|PD", "L|13".
inline std::string alert_token(const Alert& a) {
  return std::visit(
      [](const auto& p) -> std::string {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, MetricPayload>) {
          return "M|" + detail::escape_field(p.metric_name) + (p.direction == Direction::Up ? "|up" : "|down");
        } else if constexpr (std::is_same_v<P, TracePayload>) {
          return "T|" + detail::escape_field(p.parent_id) + "|" + detail::escape_field(p.operation) + "|" +
                 detail::escape_field(p.abnormal_type);
        } else {
          return "L|" + std::to_string(p.log_key);
        }
      },
      a.payload);
}

/// Token sequences per node, per modality.
using NodeTokens = std::vector<std::array<std::vector<std::string>, 3>>;

/// Groups alerts by reporter onto graph nodes. Reporters outside the graph
/// are dropped (the graph is defined by traces).
inline NodeTokens group_alerts(const InstanceGraph& graph, const std::vector<Alert>& alerts) {
  NodeTokens tokens(graph.nodes.size());
  std::unordered_map<std::string, int> index;
  for (int i = 0; i < graph.size(); ++i) index.emplace(graph.nodes[static_cast<std::size_t>(i)], i);
  for (const auto& a : alerts) {
    auto it = index.find(a.reporter_id);
    if (it == index.end()) continue;
    tokens[static_cast<std::size_t>(it->second)][static_cast<std::size_t>(a.modality())].push_back(alert_token(a));
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Skip-gram with negative sampling

struct EmbeddingConfig {
  int dimension = 128;
  int window = 3;
  int negatives = 5;
  int epochs = 5;
  double learning_rate = 0.05;
};

struct EmbeddingTable {
  int dimension = 0;
  std::map<std::string, int> vocab;  // token -> row
  Eigen::MatrixXd vectors;           // |vocab| x dimension
  Eigen::VectorXd unk;

  Eigen::VectorXd lookup(const std::string& token) const {
    auto it = vocab.find(token);
    if (it == vocab.end()) return unk;
    return vectors.row(it->second).transpose();
  }

  bool operator==(const EmbeddingTable& o) const {
    return dimension == o.dimension && vocab == o.vocab && vectors == o.vectors && unk == o.unk;
  }
};

/// word2vec-style SGNS over token sentences. Input vectors start uniform in
/// (-0.5, 0.5)/d, output vectors at zero; negatives come from the unigram
/// distribution raised to 0.75; the rate decays linearly over all updates.
/// unk is the mean of the learned vectors.
inline EmbeddingTable train_embedding(const std::vector<std::vector<std::string>>& sentences,
                                      const EmbeddingConfig& cfg, std::uint64_t seed) {
  if (cfg.dimension < 1 || cfg.window < 1 || cfg.negatives < 0 || cfg.epochs < 0 || !(cfg.learning_rate >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "bad embedding configuration");
  std::map<std::string, std::int64_t> counts;
  for (const auto& s : sentences)
    for (const auto& t : s) ++counts[t];
  if (counts.empty()) throw Error(ErrorCode::EmptyCorpus, "no tokens to embed");

  EmbeddingTable table;
  table.dimension = cfg.dimension;
  std::vector<double> cumulative;
  double mass = 0.0;
  for (const auto& [token, count] : counts) {
    table.vocab.emplace(token, static_cast<int>(table.vocab.size()));
    mass += std::pow(static_cast<double>(count), 0.75);
    cumulative.push_back(mass);
  }
  const auto vocab_size = static_cast<Eigen::Index>(counts.size());
  const Eigen::Index d = cfg.dimension;

  Rng rng(seed);
  std::uniform_real_distribution<double> uniform(-0.5, 0.5);
  Eigen::MatrixXd in(vocab_size, d);
  for (Eigen::Index i = 0; i < vocab_size; ++i)
    for (Eigen::Index k = 0; k < d; ++k) in(i, k) = uniform(rng) / static_cast<double>(d);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(vocab_size, d);

  std::vector<std::vector<int>> ids;
  std::int64_t total_positions = 0;
  for (const auto& s : sentences) {
    std::vector<int> row;
    for (const auto& t : s) row.push_back(table.vocab.at(t));
    total_positions += static_cast<std::int64_t>(row.size());
    ids.push_back(std::move(row));
  }
  std::uniform_real_distribution<double> unit(0.0, mass);
  auto draw_negative = [&] {
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), unit(rng));
    return static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative.begin(), vocab_size - 1));
  };
  auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };

  const double total_steps = static_cast<double>(std::max<std::int64_t>(1, total_positions * cfg.epochs));
  std::int64_t step = 0;
  Eigen::VectorXd grad(d);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& sentence : ids) {
      const int len = static_cast<int>(sentence.size());
      for (int i = 0; i < len; ++i, ++step) {
        double lr = cfg.learning_rate * std::max(1e-4, 1.0 - static_cast<double>(step) / total_steps);
        int center = sentence[static_cast<std::size_t>(i)];
        for (int j = std::max(0, i - cfg.window); j <= std::min(len - 1, i + cfg.window); ++j) {
          if (j == i) continue;
          int context = sentence[static_cast<std::size_t>(j)];
          grad.setZero();
          for (int n = 0; n <= cfg.negatives; ++n) {
            int target = n == 0 ? context : draw_negative();
            if (n > 0 && target == context) continue;
            double label = n == 0 ? 1.0 : 0.0;
            double g = (label - sigmoid(in.row(center).dot(out.row(target)))) * lr;
            grad += g * out.row(target).transpose();
            out.row(target) += g * in.row(center);
          }
          in.row(center) += grad.transpose();
        }
      }
    }
  }
  table.vectors = std::move(in);
  table.unk = table.vectors.colwise().mean().transpose();
  return table;
}

/// Mean of the token vectors; zero when the node has no alerts.
inline Eigen::VectorXd encode_node(const std::vector<std::string>& tokens, const EmbeddingTable& table) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(table.dimension);
  if (tokens.empty()) return v;
  for (const auto& t : tokens) v += table.lookup(t);
  return v / static_cast<double>(tokens.size());
}

inline json embedding_to_json(const EmbeddingTable& table) {
  json tokens = json::array();
  for (const auto& [token, row] : table.vocab) {
    std::vector<double> v(static_cast<std::size_t>(table.dimension));
    for (int k = 0; k < table.dimension; ++k) v[static_cast<std::size_t>(k)] = table.vectors(row, k);
    tokens.push_back({{"token", token}, {"vector", v}});
  }
  std::vector<double> unk(table.unk.data(), table.unk.data() + table.unk.size());
  return {{"dimension", table.dimension}, {"tokens", tokens}, {"unk", unk}};
}

inline EmbeddingTable embedding_from_json(const json& j) {
  EmbeddingTable table;
  table.dimension = j.at("dimension").get<int>();
  const auto& tokens = j.at("tokens");
  table.vectors.resize(static_cast<Eigen::Index>(tokens.size()), table.dimension);
  for (const auto& entry : tokens) {
    int row = static_cast<int>(table.vocab.size());
    auto v = entry.at("vector").get<std::vector<double>>();
    if (static_cast<int>(v.size()) != table.dimension)
      throw Error(ErrorCode::DimensionMismatch, "embedding vector length differs from dimension");
    table.vocab.emplace(entry.at("token").get<std::string>(), row);
    for (int k = 0; k < table.dimension; ++k) table.vectors(row, k) = v[static_cast<std::size_t>(k)];
  }
  auto unk = j.at("unk").get<std::vector<double>>();
  if (static_cast<int>(unk.size()) != table.dimension)
    throw Error(ErrorCode::DimensionMismatch, "unk vector length differs from dimension");
  table.unk = Eigen::Map<Eigen::VectorXd>(unk.data(), static_cast<Eigen::Index>(unk.size()));
  return table;
}

// ---------------------------------------------------------------------------
// Samples

struct FailureSample {
  std::string case_id;
  InstanceGraph graph;
  std::array<Eigen::MatrixXd, 3> features;  // per modality: nodes x d
  int root_cause = -1;                      // -1 when unlabeled
  int failure_type = -1;
  bool augmented = false;
  std::vector<int> node_map;  // original node index of each node

  int node_count() const { return graph.size(); }

  bool operator==(const FailureSample& o) const {
    return case_id == o.case_id && graph == o.graph && features == o.features && root_cause == o.root_cause &&
           failure_type == o.failure_type && augmented == o.augmented && node_map == o.node_map;
  }
};

inline std::array<Eigen::MatrixXd, 3> encode_features(const NodeTokens& tokens, const EmbeddingTable& table) {
  std::array<Eigen::MatrixXd, 3> features;
  for (std::size_t m = 0; m < 3; ++m) {
    features[m] = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(tokens.size()), table.dimension);
    for (std::size_t v = 0; v < tokens.size(); ++v)
      features[m].row(static_cast<Eigen::Index>(v)) = encode_node(tokens[v][m], table).transpose();
  }
  return features;
}

/// Graph, features and (optionally) labels for one window. `type_names` maps
/// failure-type strings to class indices.
inline FailureSample build_sample(const InstanceGraph& graph, const std::vector<Alert>& alerts,
                                  const EmbeddingTable& table, const std::optional<FailureRecord>& label,
                                  const std::vector<std::string>& type_names, std::string case_id = {}) {
  FailureSample s;
  s.case_id = std::move(case_id);
  s.graph = graph;
  s.features = encode_features(group_alerts(graph, alerts), table);
  s.node_map.resize(graph.nodes.size());
  for (std::size_t i = 0; i < s.node_map.size(); ++i) s.node_map[i] = static_cast<int>(i);
  if (label) {
    auto root = graph.index_of(label->root_cause_instance);
    if (!root) throw Error(ErrorCode::RootCauseNotInGraph, label->root_cause_instance + " not in window graph");
    auto type = std::find(type_names.begin(), type_names.end(), label->failure_type);
    if (type == type_names.end()) throw Error(ErrorCode::LabelOutOfRange, "unknown failure type " + label->failure_type);
    s.root_cause = *root;
    s.failure_type = static_cast<int>(type - type_names.begin());
  }
  return s;
}

inline FailureSample build_sample(const TelemetryBundle& window, const ExtractorBundle& extractors,
                                  const EmbeddingTable& table, const std::optional<FailureRecord>& label,
                                  const std::vector<std::string>& type_names, std::string case_id = {},
                                  Issues* issues = nullptr) {
  auto graph = build_graph(window.spans);
  return build_sample(graph, extractors.extract(window, issues), table, label, type_names, std::move(case_id));
}

namespace detail {
inline json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& j, Eigen::Index cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    const auto& row = j[r];
    if (static_cast<Eigen::Index>(row.size()) != cols) throw Error(ErrorCode::DimensionMismatch, "ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}
}  // namespace detail

inline json sample_to_json(const FailureSample& s) {
  json features = json::array();
  for (const auto& f : s.features) features.push_back(detail::matrix_to_json(f));
  return {{"case_id", s.case_id},   {"nodes", s.graph.nodes},       {"edges", s.graph.edges},
          {"features", features},   {"root_cause", s.root_cause},   {"failure_type", s.failure_type},
          {"augmented", s.augmented}, {"node_map", s.node_map}};
}

inline FailureSample sample_from_json(const json& j, int dimension) {
  FailureSample s;
  s.case_id = j.at("case_id").get<std::string>();
  s.graph.nodes = j.at("nodes").get<std::vector<std::string>>();
  s.graph.edges = j.at("edges").get<std::vector<std::pair<int, int>>>();
  const auto& features = j.at("features");
  if (features.size() != 3) throw Error(ErrorCode::MalformedRecord, "sample needs three feature blocks");
  for (std::size_t m = 0; m < 3; ++m) {
    s.features[m] = detail::matrix_from_json(features[m], dimension);
    if (s.features[m].rows() != s.graph.size())
      throw Error(ErrorCode::DimensionMismatch, "feature rows differ from node count");
  }
  s.root_cause = j.at("root_cause").get<int>();
  s.failure_type = j.at("failure_type").get<int>();
  s.augmented = j.at("augmented").get<bool>();
  s.node_map = j.at("node_map").get<std::vector<int>>();
  for (const auto& [a, b] : s.graph.edges) {
    if (a < 0 || b < 0 || a >= s.graph.size() || b >= s.graph.size())
      throw Error(ErrorCode::MalformedRecord, "edge references a missing node");
  }
  if (s.root_cause >= s.graph.size()) throw Error(ErrorCode::RootIndexInvalid, "root index beyond node count");
  return s;
}

struct DatasetManifest {
  std::vector<std::string> type_names;
  EmbeddingConfig embedding;
  std::uint64_t seed = 0;
  std::string extractor_fingerprint;
  std::vector<std::string> train_cases;
  std::vector<std::string> test_cases;
};

struct Dataset {
  DatasetManifest manifest;
  EmbeddingTable table;
  std::vector<FailureSample> train;
  std::vector<FailureSample> test;
};

inline json dataset_to_json(const Dataset& ds) {
  const auto& m = ds.manifest;
  json train = json::array();
  json test = json::array();
  for (const auto& s : ds.train) train.push_back(sample_to_json(s));
  for (const auto& s : ds.test) test.push_back(sample_to_json(s));
  return {{"version", 1},
          {"manifest",
           {{"failure_types", m.type_names},
            {"embedding",
             {{"dimension", m.embedding.dimension},
              {"window", m.embedding.window},
              {"negatives", m.embedding.negatives},
              {"epochs", m.embedding.epochs},
              {"learning_rate", m.embedding.learning_rate}}},
            {"seed", m.seed},
            {"extractor_fingerprint", m.extractor_fingerprint},
            {"train_cases", m.train_cases},
            {"test_cases", m.test_cases}}},
          {"embedding_table", embedding_to_json(ds.table)},
          {"train", train},
          {"test", test}};
}

inline Dataset dataset_from_json(const json& j) {
  if (j.at("version").get<int>() != 1) throw Error(ErrorCode::MalformedRecord, "unsupported dataset version");
  Dataset ds;
  const auto& m = j.at("manifest");
  ds.manifest.type_names = m.at("failure_types").get<std::vector<std::string>>();
  const auto& e = m.at("embedding");
  ds.manifest.embedding = {e.at("dimension").get<int>(), e.at("window").get<int>(), e.at("negatives").get<int>(),
                           e.at("epochs").get<int>(), e.at("learning_rate").get<double>()};
  ds.manifest.seed = m.at("seed").get<std::uint64_t>();
  ds.manifest.extractor_fingerprint = m.at("extractor_fingerprint").get<std::string>();
  ds.manifest.train_cases = m.at("train_cases").get<std::vector<std::string>>();
  ds.manifest.test_cases = m.at("test_cases").get<std::vector<std::string>>();
  ds.table = embedding_from_json(j.at("embedding_table"));
  for (const auto& s : j.at("train")) ds.train.push_back(sample_from_json(s, ds.table.dimension));
  for (const auto& s : j.at("test")) ds.test.push_back(sample_from_json(s, ds.table.dimension));
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& s : *split) {
      if (s.failure_type >= static_cast<int>(ds.manifest.type_names.size()))
        throw Error(ErrorCode::LabelOutOfRange, "failure type index beyond label map");
    }
  }
  return ds;
}

}  // namespace mvdiag
