#pragma once

// Minimal reverse-mode autodiff over dense double matrices. A Tape records
// values and backward closures; Vars are handles into it. Only the ops the
// encoder, heads and losses need are provided.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "mvdiag/common.hpp"

namespace mvdiag {

using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  double scalar() const { return value()(0, 0); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false); }
  Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  Var param(Parameter& p) {
    Var v = push(p.value, true);
    nodes_[static_cast<std::size_t>(v.id)].param = &p;
    return v;
  }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Matrix& grad(Var v) { return node(v.id).grad; }
  bool requires_grad(Var v) const { return node(v.id).requires_grad; }

  /// Appends an op result. `backward` runs only when some input needs grad.
  Var push(Matrix value, bool requires_grad, std::function<void()> backward = {}) {
    Node n;
    if (requires_grad) n.grad = Matrix::Zero(value.rows(), value.cols());
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  /// Seeds d(loss)/d(loss) = 1 and accumulates into every Parameter reached.
  void backward(Var loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw Error(ErrorCode::DimensionMismatch, "backward needs a scalar");
    if (!node(loss.id).requires_grad) return;
    node(loss.id).grad(0, 0) += 1.0;
    for (int i = loss.id; i >= 0; --i) {
      auto& n = node(i);
      if (!n.requires_grad) continue;
      if (n.backward) n.backward();
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->node(id).value; }

namespace ag {

inline bool any_grad(std::initializer_list<Var> vars) {
  return std::any_of(vars.begin(), vars.end(), [](Var v) { return v.tape->requires_grad(v); });
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(ErrorCode::DimensionMismatch, std::string(op) + ": shape mismatch");
}

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw Error(ErrorCode::DimensionMismatch, "matmul: inner dimensions differ");
  Tape& t = *a.tape;
  Var out = t.push(a.value() * b.value(), any_grad({a, b}));
  int o = out.id;
  t.node(o).backward = [&t, a, b, o] {
    const Matrix& g = t.node(o).grad;
    if (t.requires_grad(a)) t.grad(a).noalias() += g * b.value().transpose();
    if (t.requires_grad(b)) t.grad(b).noalias() += a.value().transpose() * g;
  };
  return out;
}

inline Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Tape& t = *a.tape;
  Var out = t.push(a.value() + b.value(), any_grad({a, b}));
  int o = out.id;
  t.node(o).backward = [&t, a, b, o] {
    if (t.requires_grad(a)) t.grad(a) += t.node(o).grad;
    if (t.requires_grad(b)) t.grad(b) += t.node(o).grad;
  };
  return out;
}

/// a + broadcast of the 1 x c row `bias` over every row of a.
inline Var add_row(Var a, Var bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw Error(ErrorCode::DimensionMismatch, "add_row: bias shape");
  Tape& t = *a.tape;
  Matrix v = a.value();
  v.rowwise() += bias.value().row(0);
  Var out = t.push(std::move(v), any_grad({a, bias}));
  int o = out.id;
  t.node(o).backward = [&t, a, bias, o] {
    if (t.requires_grad(a)) t.grad(a) += t.node(o).grad;
    if (t.requires_grad(bias)) t.grad(bias) += t.node(o).grad.colwise().sum();
  };
  return out;
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Var out = t.push(a.value() * s, any_grad({a}));
  int o = out.id;
  t.node(o).backward = [&t, a, s, o] { t.grad(a) += s * t.node(o).grad; };
  return out;
}

inline Var hadamard(Var a, Var b) {
  check_same_shape(a, b, "hadamard");
  Tape& t = *a.tape;
  Var out = t.push(a.value().cwiseProduct(b.value()), any_grad({a, b}));
  int o = out.id;
  t.node(o).backward = [&t, a, b, o] {
    const Matrix& g = t.node(o).grad;
    if (t.requires_grad(a)) t.grad(a) += g.cwiseProduct(b.value());
    if (t.requires_grad(b)) t.grad(b) += g.cwiseProduct(a.value());
  };
  return out;
}

inline Var relu(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.value().cwiseMax(0.0), any_grad({a}));
  int o = out.id;
  t.node(o).backward = [&t, a, o] {
    t.grad(a) += (a.value().array() > 0.0).cast<double>().matrix().cwiseProduct(t.node(o).grad);
  };
  return out;
}

inline Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Matrix v = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  Var out = t.push(std::move(v), any_grad({a}));
  int o = out.id;
  t.node(o).backward = [&t, a, o] {
    const Matrix& y = t.node(o).value;
    t.grad(a) += t.node(o).grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
  };
  return out;
}

inline Var tanh(Var a) {
  Tape& t = *a.tape;
  Matrix v = a.value().array().tanh().matrix();
  Var out = t.push(std::move(v), any_grad({a}));
  int o = out.id;
  t.node(o).backward = [&t, a, o] {
    const Matrix& y = t.node(o).value;
    t.grad(a) += t.node(o).grad.cwiseProduct((1.0 - y.array().square()).matrix());
  };
  return out;
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::DimensionMismatch, "concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error(ErrorCode::DimensionMismatch, "concat_cols: row counts differ");
    cols += p.cols();
    needs = needs || t.requires_grad(p);
  }
  Matrix v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  Var out = t.push(std::move(v), needs);
  int o = out.id;
  t.node(o).backward = [&t, parts, o] {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (t.requires_grad(p)) t.grad(p) += t.node(o).grad.middleCols(at, p.cols());
      at += p.cols();
    }
  };
  return out;
}

inline Var col_slice(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw Error(ErrorCode::DimensionMismatch, "col_slice: out of range");
  Tape& t = *a.tape;
  Var out = t.push(a.value().middleCols(start, count), any_grad({a}));
  int o = out.id;
  t.node(o).backward = [&t, a, start, count, o] { t.grad(a).middleCols(start, count) += t.node(o).grad; };
  return out;
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.value().transpose(), any_grad({a}));
  int o = out.id;
  t.node(o).backward = [&t, a, o] { t.grad(a) += t.node(o).grad.transpose(); };
  return out;
}

/// Rows of `a` picked by index; -1 yields a zero row.
inline Var gather_rows(Var a, std::vector<int> index) {
  Tape& t = *a.tape;
  Matrix v = Matrix::Zero(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t r = 0; r < index.size(); ++r)
    if (index[r] >= 0) v.row(static_cast<Eigen::Index>(r)) = a.value().row(index[r]);
  Var out = t.push(std::move(v), any_grad({a}));
  int o = out.id;
  t.node(o).backward = [&t, a, index = std::move(index), o] {
    for (std::size_t r = 0; r < index.size(); ++r)
      if (index[r] >= 0) t.grad(a).row(index[r]) += t.node(o).grad.row(static_cast<Eigen::Index>(r));
  };
  return out;
}

/// mask[r] ? fresh.row(r) : old.row(r).
inline Var masked_blend(Var fresh, Var old, std::vector<bool> mask) {
  check_same_shape(fresh, old, "masked_blend");
  Tape& t = *fresh.tape;
  Matrix v = old.value();
  for (std::size_t r = 0; r < mask.size(); ++r)
    if (mask[r]) v.row(static_cast<Eigen::Index>(r)) = fresh.value().row(static_cast<Eigen::Index>(r));
  Var out = t.push(std::move(v), any_grad({fresh, old}));
  int o = out.id;
  t.node(o).backward = [&t, fresh, old, mask = std::move(mask), o] {
    for (std::size_t r = 0; r < mask.size(); ++r) {
      auto row = static_cast<Eigen::Index>(r);
      Var target = mask[r] ? fresh : old;
      if (t.requires_grad(target)) t.grad(target).row(row) += t.node(o).grad.row(row);
    }
  };
  return out;
}

/// Sparse constant times dense var.
inline Var spmm(const SparseMatrix& a, Var x) {
  if (a.cols() != x.rows()) throw Error(ErrorCode::DimensionMismatch, "spmm: inner dimensions differ");
  Tape& t = *x.tape;
  Var out = t.push(a * x.value(), any_grad({x}));
  int o = out.id;
  t.node(o).backward = [&t, a, x, o] { t.grad(x).noalias() += a.transpose() * t.node(o).grad; };
  return out;
}

/// Each row scaled to unit L2 norm; zero rows stay zero with zero gradient.
inline Var normalize_rows(Var x) {
  Tape& t = *x.tape;
  Eigen::VectorXd norms = x.value().rowwise().norm();
  Matrix v = x.value();
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    if (norms(r) > 0.0) v.row(r) /= norms(r);
  }
  Var out = t.push(std::move(v), any_grad({x}));
  int o = out.id;
  t.node(o).backward = [&t, x, norms, o] {
    const Matrix& y = t.node(o).value;
    const Matrix& g = t.node(o).grad;
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      if (norms(r) <= 0.0) continue;
      double dot = y.row(r).dot(g.row(r));
      t.grad(x).row(r) += (g.row(r) - dot * y.row(r)) / norms(r);
    }
  };
  return out;
}

/// Column-wise max over each row segment [offsets[s], offsets[s+1]). Ties
/// send the gradient to the first maximal row; empty segments give zeros.
inline Var segment_max(Var x, std::vector<int> offsets) {
  Tape& t = *x.tape;
  const auto segments = static_cast<Eigen::Index>(offsets.size()) - 1;
  Matrix v = Matrix::Zero(segments, x.cols());
  std::vector<int> arg(static_cast<std::size_t>(segments * x.cols()), -1);
  for (Eigen::Index s = 0; s < segments; ++s) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      int best = -1;
      for (int r = offsets[static_cast<std::size_t>(s)]; r < offsets[static_cast<std::size_t>(s + 1)]; ++r)
        if (best < 0 || x.value()(r, c) > x.value()(best, c)) best = r;
      if (best >= 0) v(s, c) = x.value()(best, c);
      arg[static_cast<std::size_t>(s * x.cols() + c)] = best;
    }
  }
  Var out = t.push(std::move(v), any_grad({x}));
  int o = out.id;
  t.node(o).backward = [&t, x, arg = std::move(arg), segments, o] {
    const Matrix& g = t.node(o).grad;
    for (Eigen::Index s = 0; s < segments; ++s)
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        int r = arg[static_cast<std::size_t>(s * g.cols() + c)];
        if (r >= 0) t.grad(x)(r, c) += g(s, c);
      }
  };
  return out;
}

/// Row v of the result is the column-wise max of x over v's neighbours;
/// nodes without neighbours get a zero row.
inline Var neighbor_max(Var x, const std::vector<std::vector<int>>& neighbors) {
  Tape& t = *x.tape;
  const auto n = static_cast<Eigen::Index>(neighbors.size());
  Matrix v = Matrix::Zero(n, x.cols());
  std::vector<int> arg(static_cast<std::size_t>(n * x.cols()), -1);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& nb = neighbors[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      int best = -1;
      for (int u : nb)
        if (best < 0 || x.value()(u, c) > x.value()(best, c)) best = u;
      if (best >= 0) v(r, c) = x.value()(best, c);
      arg[static_cast<std::size_t>(r * x.cols() + c)] = best;
    }
  }
  Var out = t.push(std::move(v), any_grad({x}));
  int o = out.id;
  t.node(o).backward = [&t, x, arg = std::move(arg), n, o] {
    const Matrix& g = t.node(o).grad;
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        int u = arg[static_cast<std::size_t>(r * g.cols() + c)];
        if (u >= 0) t.grad(x)(u, c) += g(r, c);
      }
  };
  return out;
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(Matrix::Constant(1, 1, a.value().sum()), any_grad({a}));
  int o = out.id;
  t.node(o).backward = [&t, a, o] { t.grad(a).array() += t.node(o).grad(0, 0); };
  return out;
}

/// Mean over rows of -log softmax(logits)[label].
inline Var softmax_xent(Var logits, std::vector<int> labels) {
  const Eigen::Index n = logits.rows();
  const Eigen::Index c = logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw Error(ErrorCode::DimensionMismatch, "one label per row");
  for (int y : labels)
    if (y < 0 || y >= c) throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(y));
  if (n == 0) throw Error(ErrorCode::DimensionMismatch, "softmax_xent: empty batch");
  Tape& t = *logits.tape;
  Matrix prob(n, c);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    double m = logits.value().row(r).maxCoeff();
    Eigen::RowVectorXd e = (logits.value().row(r).array() - m).exp().matrix();
    double z = e.sum();
    prob.row(r) = e / z;
    loss += -(logits.value()(r, labels[static_cast<std::size_t>(r)]) - m - std::log(z));
  }
  Var out = t.push(Matrix::Constant(1, 1, loss / static_cast<double>(n)), any_grad({logits}));
  int o = out.id;
  t.node(o).backward = [&t, logits, labels = std::move(labels), prob = std::move(prob), n, o] {
    Matrix g = prob;
    for (Eigen::Index r = 0; r < n; ++r) g(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
    t.grad(logits) += g * (t.node(o).grad(0, 0) / static_cast<double>(n));
  };
  return out;
}

/// Mean over segments of -log of the softmax (within the segment) of the
/// target row. `scores` is a column; targets are segment-local indices.
inline Var segment_softmax_xent(Var scores, std::vector<int> offsets, std::vector<int> targets) {
  if (scores.cols() != 1) throw Error(ErrorCode::DimensionMismatch, "segment scores must be a column");
  const std::size_t segments = offsets.size() - 1;
  if (targets.size() != segments) throw Error(ErrorCode::DimensionMismatch, "one target per segment");
  if (segments == 0) throw Error(ErrorCode::DimensionMismatch, "segment_softmax_xent: no segments");
  Tape& t = *scores.tape;
  Matrix prob = Matrix::Zero(scores.rows(), 1);
  double loss = 0.0;
  for (std::size_t s = 0; s < segments; ++s) {
    int begin = offsets[s];
    int end = offsets[s + 1];
    if (end <= begin) throw Error(ErrorCode::RootIndexInvalid, "segment without nodes");
    if (targets[s] < 0 || targets[s] >= end - begin) throw Error(ErrorCode::RootIndexInvalid, "root index out of range");
    double m = scores.value().block(begin, 0, end - begin, 1).maxCoeff();
    double z = 0.0;
    for (int r = begin; r < end; ++r) z += std::exp(scores.value()(r, 0) - m);
    for (int r = begin; r < end; ++r) prob(r, 0) = std::exp(scores.value()(r, 0) - m) / z;
    loss += -(scores.value()(begin + targets[s], 0) - m - std::log(z));
  }
  Var out = t.push(Matrix::Constant(1, 1, loss / static_cast<double>(segments)), any_grad({scores}));
  int o = out.id;
  t.node(o).backward = [&t, scores, offsets = std::move(offsets), targets = std::move(targets), prob = std::move(prob),
                        segments, o] {
    Matrix g = prob;
    for (std::size_t s = 0; s < segments; ++s) g(offsets[s] + targets[s], 0) -= 1.0;
    t.grad(scores) += g * (t.node(o).grad(0, 0) / static_cast<double>(segments));
  };
  return out;
}

/// Supervised contrastive sum over anchors i with a nonempty positive set:
///   -1/|P_i| sum_{j in P_i} log( e^{S_ij} / (e^{S_ij} + sum_{z in N_i} e^{S_iz}) ),  S = C / tau.
inline Var supcon(Var cosine, double tau, std::vector<std::vector<int>> positives,
                  std::vector<std::vector<int>> negatives) {
  const Eigen::Index n = cosine.rows();
  if (cosine.cols() != n) throw Error(ErrorCode::DimensionMismatch, "supcon needs a square similarity matrix");
  Tape& t = *cosine.tape;
  const Matrix s = cosine.value() / tau;
  Matrix dS = Matrix::Zero(n, n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& pos = positives[static_cast<std::size_t>(i)];
    const auto& neg = negatives[static_cast<std::size_t>(i)];
    if (pos.empty()) continue;
    double shift = -std::numeric_limits<double>::infinity();
    for (int j : pos) shift = std::max(shift, s(i, j));
    for (int z : neg) shift = std::max(shift, s(i, z));
    double neg_mass = 0.0;
    for (int z : neg) neg_mass += std::exp(s(i, z) - shift);
    const double inv = 1.0 / static_cast<double>(pos.size());
    for (int j : pos) {
      double pj = std::exp(s(i, j) - shift);
      double denom = pj + neg_mass;
      loss += -inv * (s(i, j) - shift - std::log(denom));
      dS(i, j) += -inv * (1.0 - pj / denom);
      for (int z : neg) dS(i, z) += inv * std::exp(s(i, z) - shift) / denom;
    }
  }
  Var out = t.push(Matrix::Constant(1, 1, loss), any_grad({cosine}));
  int o = out.id;
  t.node(o).backward = [&t, cosine, dS = std::move(dS), tau, o] {
    t.grad(cosine) += dS * (t.node(o).grad(0, 0) / tau);
  };
  return out;
}

/// Symmetric cross-view contrastive loss between views A and B:
///   1/(2n) sum_i [ l_A(i) + l_B(i) ],
///   l_A(i) = -S_AB[i,i] + log( sum_{a != i} e^{S_AA[i,a]} + sum_b e^{S_AB[i,b]} ),
/// and l_B likewise with S_BB and S_AB transposed.
inline Var cross_view(Var caa, Var cbb, Var cab, double tau) {
  const Eigen::Index n = caa.rows();
  if (caa.cols() != n || cbb.rows() != n || cbb.cols() != n || cab.rows() != n || cab.cols() != n)
    throw Error(ErrorCode::DimensionMismatch, "cross_view needs three n x n similarity matrices");
  Tape& t = *caa.tape;
  const Matrix saa = caa.value() / tau;
  const Matrix sbb = cbb.value() / tau;
  const Matrix sab = cab.value() / tau;
  Matrix daa = Matrix::Zero(n, n);
  Matrix dbb = Matrix::Zero(n, n);
  Matrix dab = Matrix::Zero(n, n);
  double loss = 0.0;
  // One direction: `self` is the intra-view matrix, `cross(i, b)` the
  // inter-view entry, `dcross(i, b)` its gradient slot.
  auto side = [&](const Matrix& self, Matrix& dself, auto cross, auto dcross) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double shift = cross(i, 0);
      for (Eigen::Index a = 0; a < n; ++a) {
        if (a != i) shift = std::max(shift, self(i, a));
        shift = std::max(shift, cross(i, a));
      }
      double z = 0.0;
      for (Eigen::Index a = 0; a < n; ++a) {
        if (a != i) z += std::exp(self(i, a) - shift);
        z += std::exp(cross(i, a) - shift);
      }
      loss += -(cross(i, i) - shift) + std::log(z);
      for (Eigen::Index a = 0; a < n; ++a) {
        if (a != i) dself(i, a) += std::exp(self(i, a) - shift) / z;
        dcross(i, a) += std::exp(cross(i, a) - shift) / z;
      }
      dcross(i, i) -= 1.0;
    }
  };
  side(saa, daa, [&](Eigen::Index i, Eigen::Index b) { return sab(i, b); },
       [&](Eigen::Index i, Eigen::Index b) -> double& { return dab(i, b); });
  side(sbb, dbb, [&](Eigen::Index i, Eigen::Index b) { return sab(b, i); },
       [&](Eigen::Index i, Eigen::Index b) -> double& { return dab(b, i); });
  const double norm = 1.0 / (2.0 * static_cast<double>(n));
  Var out = t.push(Matrix::Constant(1, 1, loss * norm), any_grad({caa, cbb, cab}));
  int o = out.id;
  t.node(o).backward = [&t, caa, cbb, cab, daa = std::move(daa), dbb = std::move(dbb), dab = std::move(dab), norm, tau,
                        o] {
    double g = t.node(o).grad(0, 0) * norm / tau;
    if (t.requires_grad(caa)) t.grad(caa) += daa * g;
    if (t.requires_grad(cbb)) t.grad(cbb) += dbb * g;
    if (t.requires_grad(cab)) t.grad(cab) += dab * g;
  };
  return out;
}

/// Learnable uncertainty weighting with theta_z = exp(rho_z):
///   sum_z exp(-2 rho_z) / 2 * L_z + log(1 + exp(2 rho_z))
/// over the components listed in `slots` (indices into rho).
inline Var uncertainty_weighted(const std::vector<Var>& components, Var rho, std::vector<int> slots) {
  if (components.size() != slots.size()) throw Error(ErrorCode::DimensionMismatch, "one rho slot per component");
  Tape& t = *rho.tape;
  double total = 0.0;
  bool needs = t.requires_grad(rho);
  for (std::size_t k = 0; k < components.size(); ++k) {
    double r = rho.value()(0, slots[k]);
    total += std::exp(-2.0 * r) / 2.0 * components[k].scalar() + std::log1p(std::exp(2.0 * r));
    needs = needs || t.requires_grad(components[k]);
  }
  Var out = t.push(Matrix::Constant(1, 1, total), needs);
  int o = out.id;
  t.node(o).backward = [&t, components, rho, slots = std::move(slots), o] {
    double g = t.node(o).grad(0, 0);
    for (std::size_t k = 0; k < components.size(); ++k) {
      double r = rho.value()(0, slots[k]);
      double e2 = std::exp(2.0 * r);
      if (t.requires_grad(components[k])) t.grad(components[k])(0, 0) += g * std::exp(-2.0 * r) / 2.0;
      if (t.requires_grad(rho))
        t.grad(rho)(0, slots[k]) += g * (-std::exp(-2.0 * r) * components[k].scalar() + 2.0 * e2 / (1.0 + e2));
    }
  };
  return out;
}

}  // namespace ag

/// Central-difference check of d(loss)/d(params). `build` must construct the
/// loss on the given tape from the current parameter values. Probes
/// `probes_per_param` coordinates per parameter (all of them when the
/// parameter is smaller) and returns the largest relative error
/// |a - n| / max(|a|, |n|, 1e-6).
inline double grad_check(const std::function<Var(Tape&)>& build, const std::vector<Parameter*>& params,
                         int probes_per_param, Rng& rng) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(build(tape));
  }
  auto evaluate = [&] {
    Tape tape;
    return build(tape).scalar();
  };
  double worst = 0.0;
  for (auto* p : params) {
    const auto size = static_cast<int>(p->value.size());
    std::vector<int> coords(static_cast<std::size_t>(size));
    std::iota(coords.begin(), coords.end(), 0);
    if (probes_per_param < size) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(probes_per_param));
    }
    for (int k : coords) {
      double& x = p->value.data()[k];
      const double saved = x;
      const double h = 1e-5 * std::max(1.0, std::abs(saved));
      x = saved + h;
      double up = evaluate();
      x = saved - h;
      double down = evaluate();
      x = saved;
      double numeric = (up - down) / (2.0 * h);
      double analytic = p->grad.data()[k];
      double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace mvdiag
