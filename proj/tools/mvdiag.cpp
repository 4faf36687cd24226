#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mvdiag/mvdiag.hpp"

namespace {

using namespace mvdiag;

// Exit codes: 0 success, 1 validation/usage, 2 runtime.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool is_validation(ErrorCode code) {
  return code == ErrorCode::InvalidConfig || code == ErrorCode::InvalidArgument;
}

TimeWindow parse_window(const std::string& text) {
  auto colon = text.find(':');
  if (colon == std::string::npos) throw UsageError("window must be START:END in epoch milliseconds, got " + text);
  try {
    return {std::stoll(text.substr(0, colon)), std::stoll(text.substr(colon + 1))};
  } catch (const std::logic_error&) {
    throw UsageError("window bounds must be integers: " + text);
  }
}

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
};

Config resolve_config(const Globals& g) {
  std::string path = g.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv("MVDIAG_CONFIG")) path = env;
  }
  Config base;
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) throw UsageError("config file not found: " + path);
    base = load_config(path);
  }
  return finalize_config(base, g.overrides);
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << text << '\n';
}

void warn(const Issues& issues) {
  std::map<std::string, int> counts;
  for (const auto& i : issues) ++counts[std::string(to_string(i.code))];
  for (const auto& [code, n] : counts) std::cerr << "warning: " << n << " x " << code << '\n';
}

struct CaseContext {
  std::vector<FailureCase> cases;
  CaseSplit split;
  std::vector<std::string> types;
};

CaseContext case_context(const Corpus& corpus, const Config& cfg, std::int64_t alert_window_ms) {
  CaseContext c;
  c.cases = make_cases(corpus.labels, alert_window_ms);
  if (c.cases.empty()) throw Error(ErrorCode::EmptyDataset, "corpus has no labels");
  c.split = split_cases(c.cases, cfg.test_fraction, cfg.seed);
  c.types = failure_type_names(c.cases);
  return c;
}

int cmd_simulate(const Config& cfg, const std::string& out_dir) {
  auto sc = make_scenario(cfg.scenario);
  Simulator sim(sc.topology, sc.sim, sc.faults);
  auto out = sim.run();
  write_corpus(out_dir, out, sim.manifest());
  std::cerr << "wrote " << out.metrics.size() << " metrics, " << out.spans.size() << " spans, " << out.logs.size()
            << " logs, " << out.labels.size() << " labels to " << out_dir << '\n';
  return 0;
}

int cmd_extract(const Config& cfg, const std::string& corpus_dir, const std::string& out_dir,
                const std::string& train_window, std::optional<std::int64_t> alert_window) {
  auto corpus = load_corpus(corpus_dir);
  auto ctx = case_context(corpus, cfg, alert_window.value_or(cfg.alert_window_ms));
  TimeWindow tw = train_window.empty() ? default_training_window(corpus) : parse_window(train_window);
  Issues issues;
  auto extractors = fit_extractors(corpus, tw, ctx.split.train, cfg.extractors, &issues);
  std::filesystem::create_directories(out_dir);
  write_json_file(out_dir + "/extractors.json", extractors.to_json());
  std::ofstream alerts(out_dir + "/alerts.jsonl");
  if (!alerts) throw Error(ErrorCode::IoError, "cannot write alerts in " + out_dir);
  for (const auto& c : extract_cases(corpus, extractors, ctx.cases, &issues)) {
    for (const auto& a : c.alerts) {
      json j = a;
      j["case"] = c.fault.id;
      alerts << j.dump() << '\n';
    }
  }
  warn(issues);
  return 0;
}

int cmd_build_dataset(const Config& cfg, const std::string& corpus_dir, const std::string& extractors_path,
                      const std::string& out) {
  auto corpus = load_corpus(corpus_dir);
  auto ctx = case_context(corpus, cfg, cfg.alert_window_ms);
  auto extractors = ExtractorBundle::from_json(read_json_file(extractors_path));
  Issues issues;
  auto train = extract_cases(corpus, extractors, ctx.split.train, &issues);
  auto test = extract_cases(corpus, extractors, ctx.split.test, &issues);
  auto ds = build_dataset(train, test, ctx.types, cfg, extractors.fingerprint(), &issues);
  write_json_file(out, dataset_to_json(ds));
  warn(issues);
  std::cerr << ds.train.size() << " training samples, " << ds.test.size() << " test samples\n";
  return 0;
}

int cmd_train(const Config& cfg, const std::string& dataset_path, const std::string& out,
              const std::string& loss_trace) {
  auto ds = dataset_from_json(read_json_file(dataset_path));
  auto model_cfg = model_config(cfg, static_cast<int>(ds.manifest.type_names.size()));
  model_cfg.input_dim = ds.table.dimension;
  auto result = train(ds.train, model_cfg, cfg.train, derive_seed(cfg.seed, "train"),
                      [](int epoch, double loss) { std::cerr << "epoch " << epoch << " loss " << loss << '\n'; });
  Checkpoint ck{result.model,           cfg.train,       cfg.seed, result.best_epoch, result.history,
                ds.manifest.type_names, ds.table,        ds.manifest.extractor_fingerprint};
  write_json_file(out, checkpoint_to_json(ck));
  if (!loss_trace.empty()) write_json_file(loss_trace, json{{"loss", result.history}, {"best_epoch", result.best_epoch}});
  return 0;
}

int cmd_diagnose(const std::string& checkpoint_path, const std::string& extractors_path, const std::string& corpus_dir,
                 const std::string& window, bool timing, const std::string& out) {
  auto ck = checkpoint_from_json(read_json_file(checkpoint_path));
  auto extractors = ExtractorBundle::from_json(read_json_file(extractors_path));
  auto corpus = load_corpus(corpus_dir);
  Diagnoser diagnoser(ck, extractors);
  Issues issues;
  auto report = diagnoser.diagnose(corpus.telemetry.slice(parse_window(window)), &issues);
  write_text(out, report_to_json(report, timing).dump(2));
  warn(issues);
  return 0;
}

std::vector<CaseOutcome> read_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::vector<CaseOutcome> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = json::parse(line);
    CaseOutcome o;
    o.case_id = j.value("case", "");
    o.rcl.ranking = j.at("ranking").get<std::vector<std::string>>();
    o.rcl.truth = j.at("root_cause").get<std::string>();
    o.fti = {j.at("predicted_type").get<int>(), j.at("failure_type").get<int>()};
    out.push_back(std::move(o));
  }
  return out;
}

int cmd_evaluate(const std::string& checkpoint_path, const std::string& dataset_path, const std::string& predictions,
                 const std::string& out) {
  std::vector<CaseOutcome> outcomes;
  if (!predictions.empty()) {
    outcomes = read_predictions(predictions);
  } else {
    if (checkpoint_path.empty() || dataset_path.empty())
      throw UsageError("evaluate needs --checkpoint and --dataset, or --predictions");
    auto ck = checkpoint_from_json(read_json_file(checkpoint_path));
    auto ds = dataset_from_json(read_json_file(dataset_path));
    outcomes = evaluate_samples(ck.model, ds.test);
  }
  if (outcomes.empty()) throw Error(ErrorCode::EmptyDataset, "nothing to evaluate");
  write_text(out, summary_to_json(summarize(outcomes)).dump(2));
  return 0;
}

int cmd_explain(const std::string& checkpoint_path, const std::string& dataset_path, const std::string& case_id,
                const std::string& out) {
  auto ck = checkpoint_from_json(read_json_file(checkpoint_path));
  auto ds = dataset_from_json(read_json_file(dataset_path));
  json report = json::array();
  for (const auto& s : ds.test) {
    if (!case_id.empty() && s.case_id != case_id) continue;
    auto p = predict(ck.model, s);
    auto shap = explain(ck.model, p);
    auto modal = [](const std::array<double, 3>& v) { return json{{"metric", v[0]}, {"trace", v[1]}, {"log", v[2]}}; };
    report.push_back({{"case", s.case_id},
                      {"root_cause", s.graph.nodes.at(static_cast<std::size_t>(argmax(p.node_probs)))},
                      {"failure_type", ck.type_names.at(static_cast<std::size_t>(argmax(p.class_probs)))},
                      {"shap", {{"rcl", modal(shap[0])}, {"fti", modal(shap[1])}}}});
  }
  if (report.empty()) throw UsageError("no test case matches '" + case_id + "'");
  write_text(out, report.dump(2));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view root cause localization and failure typing for microservices"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config_path, "TOML config (default: $MVDIAG_CONFIG)");
  app.add_option("--set", g.overrides, "Override a config key, e.g. --set train.max_epochs=50");

  std::string out, corpus, extractors, dataset, checkpoint, window, train_window, predictions, loss_trace, case_id;
  std::optional<std::int64_t> alert_window;
  bool no_timing = false;

  auto* simulate = app.add_subcommand("simulate", "Generate a labeled synthetic corpus");
  simulate->add_option("-o,--out", out, "Output directory")->required();

  auto* extract = app.add_subcommand("extract", "Fit extractors and write per-case alerts");
  extract->add_option("--corpus", corpus, "Corpus directory")->required();
  extract->add_option("-o,--out", out, "Output directory")->required();
  extract->add_option("--train-window", train_window, "Clean training window START:END (ms)");
  extract->add_option("--alert-window", alert_window, "Alert window length after each injection (ms)");

  auto* build = app.add_subcommand("build-dataset", "Build the train/test dataset file");
  build->add_option("--corpus", corpus, "Corpus directory")->required();
  build->add_option("--extractors", extractors, "Fitted extractor bundle")->required();
  build->add_option("-o,--out", out, "Dataset file")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--dataset", dataset, "Dataset file")->required();
  train_cmd->add_option("-o,--out", out, "Checkpoint file")->required();
  train_cmd->add_option("--loss-trace", loss_trace, "Write per-epoch losses here");

  auto* diagnose = app.add_subcommand("diagnose", "Diagnose one telemetry window");
  diagnose->add_option("--checkpoint", checkpoint)->required();
  diagnose->add_option("--extractors", extractors)->required();
  diagnose->add_option("--corpus", corpus, "Directory with metrics/traces/logs JSONL")->required();
  diagnose->add_option("--window", window, "START:END (ms)")->required();
  diagnose->add_flag("--no-timing", no_timing, "Omit stage timings from the report");
  diagnose->add_option("-o,--out", out, "Report file (default stdout)");

  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on the test split or a predictions file");
  evaluate->add_option("--checkpoint", checkpoint);
  evaluate->add_option("--dataset", dataset);
  evaluate->add_option("--predictions", predictions, "JSONL with ranking, root_cause, predicted_type, failure_type");
  evaluate->add_option("-o,--out", out, "Metrics file (default stdout)");

  auto* explain_cmd = app.add_subcommand("explain", "Modality Shapley values for test cases");
  explain_cmd->add_option("--checkpoint", checkpoint)->required();
  explain_cmd->add_option("--dataset", dataset)->required();
  explain_cmd->add_option("--case", case_id, "Restrict to one case id");
  explain_cmd->add_option("-o,--out", out, "Report file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(resolve_config(g), out);
    if (extract->parsed()) return cmd_extract(resolve_config(g), corpus, out, train_window, alert_window);
    if (build->parsed()) return cmd_build_dataset(resolve_config(g), corpus, extractors, out);
    if (train_cmd->parsed()) return cmd_train(resolve_config(g), dataset, out, loss_trace);
    if (diagnose->parsed()) {
      resolve_config(g);
      return cmd_diagnose(checkpoint, extractors, corpus, window, !no_timing, out);
    }
    if (evaluate->parsed()) {
      resolve_config(g);
      return cmd_evaluate(checkpoint, dataset, predictions, out);
    }
    if (explain_cmd->parsed()) {
      resolve_config(g);
      return cmd_explain(checkpoint, dataset, case_id, out);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return is_validation(e.code()) ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
