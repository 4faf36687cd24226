#pragma once

// Adam training with early stopping, and the versioned checkpoint format.

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvdiag/common.hpp"
#include "mvdiag/dataset.hpp"
#include "mvdiag/model.hpp"

namespace mvdiag {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  int batch_size = 32;
  int max_epochs = 500;
  int patience = 10;
  double min_delta = 1e-4;
};

class Adam {
 public:
  Adam(const std::vector<Parameter>& params, double lr, double weight_decay)
      : lr_(lr), weight_decay_(weight_decay) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
  }

  /// L2 decay is folded into the gradient before the moment updates.
  void step(std::vector<Parameter>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      Matrix g = p.grad + weight_decay_ * p.value;
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * g;
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * g.cwiseProduct(g);
      p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + kEps);
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double lr_;
  double weight_decay_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

/// Shuffled mini-batches; a trailing singleton joins the previous batch so
/// that every batch can form contrastive pairs.
inline std::vector<std::vector<int>> make_batches(int n, int batch_size, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < n; start += batch_size) {
    int end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  if (batches.size() >= 2 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back()[0]);
    batches.pop_back();
  }
  return batches;
}

struct TrainResult {
  Model model;  // best-loss parameters
  int best_epoch = -1;
  int epochs_run = 0;
  std::vector<double> history;  // mean total loss per epoch
};

using EpochCallback = std::function<void(int epoch, double loss)>;

inline TrainResult train(const std::vector<FailureSample>& data, const ModelConfig& model_cfg,
                         const TrainConfig& cfg, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  if (data.empty()) throw Error(ErrorCode::EmptyDataset, "no training samples");
  if (cfg.batch_size < 1 || cfg.max_epochs < 0 || cfg.patience < 1 || !(cfg.learning_rate >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "bad training configuration");
  for (const auto& s : data) {
    if (s.root_cause < 0 || s.failure_type < 0) throw Error(ErrorCode::RootIndexInvalid, "unlabeled training sample");
    if (s.failure_type >= model_cfg.classes) throw Error(ErrorCode::LabelOutOfRange, s.case_id);
  }
  Model model(model_cfg, seed);
  Adam adam(model.params(), cfg.learning_rate, cfg.weight_decay);
  Rng rng(derive_seed(seed, "train"));
  TrainResult result;
  result.model = model;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    auto batches = make_batches(static_cast<int>(data.size()), cfg.batch_size, rng);
    double weighted = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<const FailureSample*> members;
      for (int i : batches[b]) members.push_back(&data[static_cast<std::size_t>(i)]);
      auto batch = make_batch(members);
      model.zero_grad();
      Tape tape;
      Model::Binding bind(tape, model);
      auto forward = model.forward(bind, batch);
      auto losses = model.losses(bind, forward, batch);
      double value = losses.total.scalar();
      if (!std::isfinite(value))
        throw Error(ErrorCode::NonFiniteLoss,
                    "epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + " loss " + std::to_string(value));
      tape.backward(losses.total);
      adam.step(model.params());
      weighted += value * static_cast<double>(members.size());
    }
    double epoch_loss = weighted / static_cast<double>(data.size());
    result.history.push_back(epoch_loss);
    result.epochs_run = epoch + 1;
    if (on_epoch) on_epoch(epoch, epoch_loss);
    if (epoch_loss < best - cfg.min_delta) {
      best = epoch_loss;
      result.best_epoch = epoch;
      result.model = model;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  if (result.best_epoch < 0) result.model = model;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  TrainConfig train;
  std::uint64_t seed = 0;
  int epoch = -1;
  std::vector<double> history;
  std::vector<std::string> type_names;
  EmbeddingTable table;
  std::string extractor_fingerprint;
};

inline json model_config_to_json(const ModelConfig& c) {
  return {{"input_dim", c.input_dim},
          {"hidden_dim", c.hidden_dim},
          {"output_dim", c.output_dim},
          {"layers", c.layers},
          {"aggregator", std::string(to_string(c.aggregator))},
          {"head_hidden", c.head_hidden},
          {"classes", c.classes},
          {"tau", c.tau},
          {"omega", c.omega},
          {"use_task_oriented", c.use_task_oriented},
          {"use_cross_modal", c.use_cross_modal}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.input_dim = j.at("input_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.output_dim = j.at("output_dim").get<int>();
  c.layers = j.at("layers").get<int>();
  c.aggregator = parse_aggregator(j.at("aggregator").get<std::string>());
  c.head_hidden = j.at("head_hidden").get<int>();
  c.classes = j.at("classes").get<int>();
  c.tau = j.at("tau").get<double>();
  c.omega = j.at("omega").get<double>();
  c.use_task_oriented = j.at("use_task_oriented").get<bool>();
  c.use_cross_modal = j.at("use_cross_modal").get<bool>();
  return c;
}

/// Stable hash of the model configuration, recorded for compatibility checks.
inline std::string config_hash(const ModelConfig& c) { return hex64(fnv1a(model_config_to_json(c).dump())); }

inline json checkpoint_to_json(const Checkpoint& ck) {
  json params = json::array();
  for (const auto& p : ck.model.params()) {
    std::vector<double> values(static_cast<std::size_t>(p.value.size()));
    for (Eigen::Index r = 0, k = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c, ++k) values[static_cast<std::size_t>(k)] = p.value(r, c);
    params.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}, {"values", values}});
  }
  return {{"format", "mvdiag-checkpoint"},
          {"version", kCheckpointVersion},
          {"model", model_config_to_json(ck.model.config())},
          {"config_hash", config_hash(ck.model.config())},
          {"train",
           {{"learning_rate", ck.train.learning_rate},
            {"weight_decay", ck.train.weight_decay},
            {"batch_size", ck.train.batch_size},
            {"max_epochs", ck.train.max_epochs},
            {"patience", ck.train.patience},
            {"min_delta", ck.train.min_delta}}},
          {"seed", ck.seed},
          {"epoch", ck.epoch},
          {"loss_history", ck.history},
          {"failure_types", ck.type_names},
          {"extractor_fingerprint", ck.extractor_fingerprint},
          {"embedding_table", embedding_to_json(ck.table)},
          {"params", params}};
}

inline Checkpoint checkpoint_from_json(const json& j) {
  if (j.value("format", "") != "mvdiag-checkpoint") throw Error(ErrorCode::MalformedRecord, "not a checkpoint");
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw Error(ErrorCode::MalformedRecord, "unsupported checkpoint version");
  Checkpoint ck;
  auto cfg = model_config_from_json(j.at("model"));
  if (config_hash(cfg) != j.at("config_hash").get<std::string>())
    throw Error(ErrorCode::ChecksumMismatch, "checkpoint config hash does not match its config");
  ck.model = Model(cfg, 0);
  std::set<std::string> seen;
  for (const auto& p : j.at("params")) {
    auto name = p.at("name").get<std::string>();
    if (!ck.model.has_param(name)) throw Error(ErrorCode::MalformedRecord, "unexpected parameter " + name);
    auto& target = ck.model.param(name);
    auto shape = p.at("shape").get<std::vector<Eigen::Index>>();
    auto values = p.at("values").get<std::vector<double>>();
    if (shape.size() != 2 || shape[0] != target.value.rows() || shape[1] != target.value.cols() ||
        static_cast<Eigen::Index>(values.size()) != target.value.size())
      throw Error(ErrorCode::DimensionMismatch, "parameter " + name + " has the wrong shape");
    for (Eigen::Index r = 0, k = 0; r < shape[0]; ++r)
      for (Eigen::Index c = 0; c < shape[1]; ++c, ++k) target.value(r, c) = values[static_cast<std::size_t>(k)];
    seen.insert(name);
  }
  if (seen.size() != ck.model.params().size()) throw Error(ErrorCode::MalformedRecord, "checkpoint misses parameters");
  const auto& t = j.at("train");
  ck.train = {t.at("learning_rate").get<double>(), t.at("weight_decay").get<double>(), t.at("batch_size").get<int>(),
              t.at("max_epochs").get<int>(),       t.at("patience").get<int>(),          t.at("min_delta").get<double>()};
  ck.seed = j.at("seed").get<std::uint64_t>();
  ck.epoch = j.at("epoch").get<int>();
  ck.history = j.at("loss_history").get<std::vector<double>>();
  ck.type_names = j.at("failure_types").get<std::vector<std::string>>();
  ck.extractor_fingerprint = j.at("extractor_fingerprint").get<std::string>();
  ck.table = embedding_from_json(j.at("embedding_table"));
  return ck;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const json& j, int indent = -1) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << j.dump(indent) << '\n';
  if (!out) throw Error(ErrorCode::IoError, "write failure on " + path);
}

}  // namespace mvdiag
