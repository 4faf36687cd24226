#pragma once

// Three per-modality GraphSAGE encoders, the RCL/FTI heads and the four
// training losses. Samples of a mini-batch are packed into one
// block-diagonal graph so each layer is a handful of dense products.

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "mvdiag/autograd.hpp"
#include "mvdiag/common.hpp"
#include "mvdiag/dataset.hpp"

namespace mvdiag {

enum class Aggregator { Mean, Pool, Lstm };

inline std::string_view to_string(Aggregator a) {
  switch (a) {
    case Aggregator::Mean: return "mean";
    case Aggregator::Pool: return "pool";
    case Aggregator::Lstm: return "lstm";
  }
  return "?";
}

inline Aggregator parse_aggregator(const std::string& s) {
  if (s == "mean") return Aggregator::Mean;
  if (s == "pool") return Aggregator::Pool;
  if (s == "lstm") return Aggregator::Lstm;
  throw Error(ErrorCode::InvalidConfig, "unknown aggregator '" + s + "'");
}

struct ModelConfig {
  int input_dim = 128;
  int hidden_dim = 64;
  int output_dim = 32;
  int layers = 2;
  Aggregator aggregator = Aggregator::Mean;
  int head_hidden = 64;
  int classes = 1;
  double tau = 0.3;
  double omega = 0.1;
  bool use_task_oriented = true;
  bool use_cross_modal = true;

  /// in -> hidden (repeated) -> out; one layer maps in -> out directly.
  std::vector<int> widths() const {
    std::vector<int> w{input_dim};
    for (int l = 1; l < layers; ++l) w.push_back(hidden_dim);
    w.push_back(output_dim);
    return w;
  }

  void validate() const {
    if (input_dim < 1 || hidden_dim < 1 || output_dim < 1 || head_hidden < 1)
      throw Error(ErrorCode::InvalidConfig, "layer widths must be positive");
    if (layers < 1) throw Error(ErrorCode::InvalidConfig, "need at least one graph layer");
    if (classes < 1) throw Error(ErrorCode::InvalidConfig, "need at least one failure class");
    if (!(tau > 0.0)) throw Error(ErrorCode::InvalidConfig, "tau must be positive");
    if (!(omega >= 0.0)) throw Error(ErrorCode::InvalidConfig, "omega must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Batches

struct GraphBatch {
  std::vector<int> offsets{0};  // sample s owns rows [offsets[s], offsets[s+1])
  SparseMatrix mean_adjacency;  // row-normalized, block diagonal
  std::vector<std::vector<int>> neighbors;  // ascending, global row ids
  std::array<Matrix, 3> features;
  std::vector<int> roots;  // segment-local; -1 when unlabeled
  std::vector<int> types;
  std::vector<std::string> root_names;

  int size() const { return static_cast<int>(offsets.size()) - 1; }
  int total_nodes() const { return offsets.back(); }
};

inline GraphBatch make_batch(const std::vector<const FailureSample*>& samples) {
  GraphBatch b;
  if (samples.empty()) throw Error(ErrorCode::EmptyDataset, "empty batch");
  const Eigen::Index d = samples[0]->features[0].cols();
  for (const auto* s : samples) {
    if (s->node_count() < 1) throw Error(ErrorCode::EmptyTraces, "sample without nodes");
    for (const auto& f : s->features)
      if (f.cols() != d || f.rows() != s->node_count())
        throw Error(ErrorCode::DimensionMismatch, "sample features do not match graph or batch width");
    b.offsets.push_back(b.offsets.back() + s->node_count());
  }
  const int total = b.total_nodes();
  b.neighbors.assign(static_cast<std::size_t>(total), {});
  for (auto& f : b.features) f.resize(total, d);
  std::vector<Eigen::Triplet<double>> triplets;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto* sample = samples[s];
    const int base = b.offsets[s];
    auto adj = sample->graph.adjacency();
    for (int v = 0; v < sample->node_count(); ++v) {
      auto& nb = b.neighbors[static_cast<std::size_t>(base + v)];
      for (int u : adj[static_cast<std::size_t>(v)]) nb.push_back(base + u);
      for (int u : nb) triplets.emplace_back(base + v, u, 1.0 / static_cast<double>(nb.size()));
    }
    for (std::size_t m = 0; m < 3; ++m) b.features[m].middleRows(base, sample->node_count()) = sample->features[m];
    if (sample->root_cause >= sample->node_count()) throw Error(ErrorCode::RootIndexInvalid, sample->case_id);
    b.roots.push_back(sample->root_cause);
    b.types.push_back(sample->failure_type);
    b.root_names.push_back(sample->root_cause >= 0
                               ? sample->graph.nodes[static_cast<std::size_t>(sample->root_cause)]
                               : std::string());
  }
  b.mean_adjacency.resize(total, total);
  b.mean_adjacency.setFromTriplets(triplets.begin(), triplets.end());
  return b;
}

// ---------------------------------------------------------------------------
// Model

class Model {
 public:
  Model() = default;

  /// Glorot-uniform weights, zero biases, rho = 0 (theta = 1).
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "init"));
    auto glorot = [&](const std::string& name, int fan_in, int fan_out) {
      double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> u(-limit, limit);
      Matrix w(fan_in, fan_out);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
      add(name, std::move(w));
    };
    auto zeros = [&](const std::string& name, int rows, int cols) { add(name, Matrix::Zero(rows, cols)); };
    auto widths = cfg_.widths();
    for (char m : {'M', 'T', 'L'}) {
      for (int l = 0; l < cfg_.layers; ++l) {
        std::string p = std::string("enc.") + m + "." + std::to_string(l) + ".";
        int in = widths[static_cast<std::size_t>(l)];
        int out = widths[static_cast<std::size_t>(l + 1)];
        if (cfg_.aggregator == Aggregator::Pool) {
          glorot(p + "pool.W", in, in);
          zeros(p + "pool.b", 1, in);
        } else if (cfg_.aggregator == Aggregator::Lstm) {
          glorot(p + "lstm.Wx", in, 4 * in);
          glorot(p + "lstm.Wh", in, 4 * in);
          zeros(p + "lstm.b", 1, 4 * in);
        }
        glorot(p + "W", 2 * in, out);
        zeros(p + "b", 1, out);
      }
    }
    const int fused = 3 * cfg_.output_dim;
    glorot("fti.0.W", fused, cfg_.head_hidden);
    zeros("fti.0.b", 1, cfg_.head_hidden);
    glorot("fti.1.W", cfg_.head_hidden, cfg_.classes);
    zeros("fti.1.b", 1, cfg_.classes);
    glorot("rcl.0.W", fused, cfg_.head_hidden);
    zeros("rcl.0.b", 1, cfg_.head_hidden);
    glorot("rcl.1.W", cfg_.head_hidden, 1);
    zeros("rcl.1.b", 1, 1);
    zeros("loss.rho", 1, 4);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  Parameter& param(const std::string& name) { return params_.at(index_.at(name)); }
  const Parameter& param(const std::string& name) const { return params_.at(index_.at(name)); }
  bool has_param(const std::string& name) const { return index_.count(name) > 0; }

  /// Encoder parameters: everything feeding the node and graph features.
  bool is_shared(const std::string& name) const { return name.rfind("enc.", 0) == 0; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Binds parameters onto a tape either as differentiable leaves or as
  /// constants (inference).
  class Binding {
   public:
    /// Differentiable leaves that accumulate into the model's gradients.
    Binding(Tape& tape, Model& model) : tape_(tape), model_(model), mutable_(&model) {}
    /// Constants only, for inference on a frozen model.
    Binding(Tape& tape, const Model& model) : tape_(tape), model_(model) {}

    Var operator()(const std::string& name) {
      auto it = vars_.find(name);
      if (it != vars_.end()) return it->second;
      Var v = mutable_ != nullptr ? tape_.param(mutable_->param(name)) : tape_.constant(model_.param(name).value);
      vars_.emplace(name, v);
      return v;
    }
    Tape& tape() { return tape_; }

   private:
    Tape& tape_;
    const Model& model_;
    Model* mutable_ = nullptr;
    std::map<std::string, Var> vars_;
  };

  struct Forward {
    std::array<Var, 3> nodes;   // final-layer node embeddings per modality
    std::array<Var, 3> graphs;  // max-pooled graph features per modality
    Var fused_nodes;            // E_v = E^M ++ E^T ++ E^L
    Var fused_graph;            // F = F^M ++ F^T ++ F^L
    Var fti_logits;
    Var rcl_scores;
  };

  Var encode_modality(Binding& bind, const GraphBatch& batch, int modality, Var* graph_feature = nullptr) const {
    static constexpr char kTag[] = {'M', 'T', 'L'};
    Tape& tape = bind.tape();
    if (batch.features[static_cast<std::size_t>(modality)].cols() != cfg_.input_dim)
      throw Error(ErrorCode::DimensionMismatch, "feature width differs from encoder input width");
    Var h = tape.constant(batch.features[static_cast<std::size_t>(modality)]);
    auto widths = cfg_.widths();
    for (int l = 0; l < cfg_.layers; ++l) {
      std::string p = std::string("enc.") + kTag[modality] + "." + std::to_string(l) + ".";
      Var agg = aggregate(bind, batch, h, p, widths[static_cast<std::size_t>(l)]);
      Var z = ag::add_row(ag::matmul(ag::concat_cols({h, agg}), bind(p + "W")), bind(p + "b"));
      h = ag::normalize_rows(ag::relu(z));
    }
    if (graph_feature != nullptr) *graph_feature = ag::segment_max(h, batch.offsets);
    return h;
  }

  Var fti_head(Binding& bind, Var fused_graph) const {
    Var h = ag::relu(ag::add_row(ag::matmul(fused_graph, bind("fti.0.W")), bind("fti.0.b")));
    return ag::add_row(ag::matmul(h, bind("fti.1.W")), bind("fti.1.b"));
  }

  Var rcl_head(Binding& bind, Var fused_nodes) const {
    Var h = ag::relu(ag::add_row(ag::matmul(fused_nodes, bind("rcl.0.W")), bind("rcl.0.b")));
    return ag::add_row(ag::matmul(h, bind("rcl.1.W")), bind("rcl.1.b"));
  }

  Forward forward(Binding& bind, const GraphBatch& batch) const {
    Forward f;
    for (int m = 0; m < 3; ++m)
      f.nodes[static_cast<std::size_t>(m)] = encode_modality(bind, batch, m, &f.graphs[static_cast<std::size_t>(m)]);
    f.fused_nodes = ag::concat_cols({f.nodes[0], f.nodes[1], f.nodes[2]});
    f.fused_graph = ag::concat_cols({f.graphs[0], f.graphs[1], f.graphs[2]});
    f.fti_logits = fti_head(bind, f.fused_graph);
    f.rcl_scores = rcl_head(bind, f.fused_nodes);
    return f;
  }

  struct Losses {
    Var rcl;
    Var fti;
    std::optional<Var> task_oriented;  // unscaled
    std::optional<Var> cross_modal;    // unscaled
    Var total;
  };

  /// The four components and their uncertainty-weighted total. Disabled
  /// contrastive terms are left out of the sum entirely; the task-oriented
  /// term also drops out for single-sample batches.
  Losses losses(Binding& bind, const Forward& f, const GraphBatch& batch) const {
    Losses out;
    std::vector<int> targets(batch.roots.begin(), batch.roots.end());
    out.rcl = ag::segment_softmax_xent(f.rcl_scores, batch.offsets, targets);
    out.fti = ag::softmax_xent(f.fti_logits, batch.types);
    std::vector<Var> components{out.rcl, out.fti};
    std::vector<int> slots{0, 1};
    if (cfg_.use_task_oriented && batch.size() >= 2) {
      out.task_oriented = task_oriented_term(f.graphs, batch.root_names, batch.types, cfg_.tau);
      components.push_back(ag::scale(*out.task_oriented, cfg_.omega));
      slots.push_back(2);
    }
    if (cfg_.use_cross_modal) {
      out.cross_modal = cross_modal_term(f.graphs, cfg_.tau);
      components.push_back(ag::scale(*out.cross_modal, cfg_.omega));
      slots.push_back(3);
    }
    out.total = ag::uncertainty_weighted(components, bind("loss.rho"), slots);
    return out;
  }

  static Var cosine_matrix(Var a, Var b) {
    return ag::matmul(ag::normalize_rows(a), ag::transpose(ag::normalize_rows(b)));
  }

  /// Sum over modalities of the supervised contrastive loss. Metric and
  /// trace positives share the root-cause instance, log positives the
  /// failure type; an anchor is never its own positive or negative.
  static Var task_oriented_term(const std::array<Var, 3>& graphs, const std::vector<std::string>& roots,
                                const std::vector<int>& types, double tau) {
    const std::size_t n = roots.size();
    if (n < 2) throw Error(ErrorCode::BatchTooSmall, "task-oriented loss needs at least two samples");
    std::array<std::vector<std::vector<int>>, 3> pos;
    std::array<std::vector<std::vector<int>>, 3> neg;
    for (auto& p : pos) p.assign(n, {});
    for (auto& q : neg) q.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        int jj = static_cast<int>(j);
        bool same_root = roots[i] == roots[j];
        bool same_type = types[i] == types[j];
        for (std::size_t m = 0; m < 2; ++m) (same_root ? pos[m] : neg[m])[i].push_back(jj);
        (same_type ? pos[2] : neg[2])[i].push_back(jj);
      }
    }
    Var total{};
    for (std::size_t m = 0; m < 3; ++m) {
      Var term = ag::supcon(cosine_matrix(graphs[m], graphs[m]), tau, pos[m], neg[m]);
      total = m == 0 ? term : ag::add(total, term);
    }
    return total;
  }

  /// Metric as the core view, aligned with trace and with log.
  static Var cross_modal_term(const std::array<Var, 3>& graphs, double tau) {
    Var caa = cosine_matrix(graphs[0], graphs[0]);
    Var mt = ag::cross_view(caa, cosine_matrix(graphs[1], graphs[1]), cosine_matrix(graphs[0], graphs[1]), tau);
    Var ml = ag::cross_view(caa, cosine_matrix(graphs[2], graphs[2]), cosine_matrix(graphs[0], graphs[2]), tau);
    return ag::add(mt, ml);
  }

 private:
  void add(const std::string& name, Matrix value) {
    index_.emplace(name, params_.size());
    params_.emplace_back(name, std::move(value));
  }

  Var aggregate(Binding& bind, const GraphBatch& batch, Var h, const std::string& p, int width) const {
    switch (cfg_.aggregator) {
      case Aggregator::Mean: return ag::spmm(batch.mean_adjacency, h);
      case Aggregator::Pool: {
        Var pooled = ag::relu(ag::add_row(ag::matmul(h, bind(p + "pool.W")), bind(p + "pool.b")));
        return ag::neighbor_max(pooled, batch.neighbors);
      }
      case Aggregator::Lstm: return lstm_aggregate(bind, batch, h, p, width);
    }
    throw Error(ErrorCode::InvalidConfig, "unknown aggregator");
  }

  // Runs an LSTM over each node's neighbours in ascending index order and
  // takes the final hidden state. All nodes advance together; a node whose
  // sequence has ended keeps its state.
  Var lstm_aggregate(Binding& bind, const GraphBatch& batch, Var h, const std::string& p, int width) const {
    Tape& tape = bind.tape();
    const int total = batch.total_nodes();
    std::size_t steps = 0;
    for (const auto& nb : batch.neighbors) steps = std::max(steps, nb.size());
    Var state = tape.constant(Matrix::Zero(total, width));
    Var cell = tape.constant(Matrix::Zero(total, width));
    Var wx = bind(p + "lstm.Wx");
    Var wh = bind(p + "lstm.Wh");
    Var bias = bind(p + "lstm.b");
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<int> index(static_cast<std::size_t>(total), -1);
      std::vector<bool> active(static_cast<std::size_t>(total), false);
      for (std::size_t v = 0; v < batch.neighbors.size(); ++v) {
        if (t < batch.neighbors[v].size()) {
          index[v] = batch.neighbors[v][t];
          active[v] = true;
        }
      }
      Var x = ag::gather_rows(h, index);
      Var gates = ag::add_row(ag::add(ag::matmul(x, wx), ag::matmul(state, wh)), bias);
      Var in = ag::sigmoid(ag::col_slice(gates, 0, width));
      Var forget = ag::sigmoid(ag::col_slice(gates, width, width));
      Var candidate = ag::tanh(ag::col_slice(gates, 2 * width, width));
      Var out = ag::sigmoid(ag::col_slice(gates, 3 * width, width));
      Var next_cell = ag::add(ag::hadamard(forget, cell), ag::hadamard(in, candidate));
      Var next_state = ag::hadamard(out, ag::tanh(next_cell));
      cell = ag::masked_blend(next_cell, cell, active);
      state = ag::masked_blend(next_state, state, active);
    }
    return state;
  }

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Plain-value forms of the losses

inline double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double na = a.norm();
  double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

/// exp(cos(F, F') / tau); a zero vector has cosine 0.
inline double phi(const Eigen::VectorXd& f, const Eigen::VectorXd& g, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorCode::InvalidArgument, "tau must be positive");
  return std::exp(cosine_similarity(f, g) / tau);
}

/// `features[m]` holds one graph feature per row (sample).
inline double task_oriented_loss(const std::array<Matrix, 3>& features, const std::vector<std::string>& roots,
                                 const std::vector<int>& types, double tau) {
  Tape tape;
  std::array<Var, 3> g{tape.constant(features[0]), tape.constant(features[1]), tape.constant(features[2])};
  return Model::task_oriented_term(g, roots, types, tau).scalar();
}

inline double cross_modal_loss(const std::array<Matrix, 3>& features, double tau) {
  Tape tape;
  std::array<Var, 3> g{tape.constant(features[0]), tape.constant(features[1]), tape.constant(features[2])};
  return Model::cross_modal_term(g, tau).scalar();
}

inline double fti_loss(const Matrix& logits, const std::vector<int>& labels) {
  Tape tape;
  return ag::softmax_xent(tape.constant(logits), labels).scalar();
}

/// `scores[i]` are the node scores of sample i, `roots[i]` its root index.
inline double rcl_loss(const std::vector<Eigen::VectorXd>& scores, const std::vector<int>& roots) {
  std::vector<int> offsets{0};
  for (const auto& s : scores) offsets.push_back(offsets.back() + static_cast<int>(s.size()));
  Matrix column(offsets.back(), 1);
  for (std::size_t i = 0; i < scores.size(); ++i) column.middleRows(offsets[i], scores[i].size()) = scores[i];
  Tape tape;
  return ag::segment_softmax_xent(tape.constant(column), offsets, roots).scalar();
}

struct LossComponents {
  double rcl = 0.0;
  double fti = 0.0;
  double task_oriented = 0.0;
  double cross_modal = 0.0;
};

struct LossWeights {
  std::array<double, 4> theta{1.0, 1.0, 1.0, 1.0};
  double omega = 0.1;
};

/// sum_z L(z) / (2 theta_z^2) + ln(1 + theta_z^2), with the contrastive
/// components scaled by omega first.
inline double total_loss(const LossComponents& c, const LossWeights& w) {
  std::array<double, 4> l{c.rcl, c.fti, w.omega * c.task_oriented, w.omega * c.cross_modal};
  double total = 0.0;
  for (std::size_t z = 0; z < 4; ++z) {
    double t2 = w.theta[z] * w.theta[z];
    total += l[z] / (2.0 * t2) + std::log1p(t2);
  }
  return total;
}

}  // namespace mvdiag
