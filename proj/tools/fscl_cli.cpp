// Command-line front end: synthetic data generation, base training,
// incremental sessions, evaluation, embedding export and the ablation matrix.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fscl/fscl.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
};

fscl::ExperimentConfig resolve_config(const GlobalOptions& g) {
  fscl::ExperimentConfig cfg =
      g.config_path.empty() ? fscl::ExperimentConfig::desk_default() : fscl::load_config(g.config_path);
  if (g.seed) cfg.set_seed(*g.seed);
  cfg.validate();
  return cfg;
}

fs::path output_path(const GlobalOptions& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return fs::path(g.out_dir) / name;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) fscl::fail(fscl::ErrorCode::kIo, "cannot open for writing: " + path.string());
  out << text;
  if (!out) fscl::fail(fscl::ErrorCode::kIo, "write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void print_summary(const std::string& name, const fscl::SessionReport& report) {
  std::cout << name << " [" << report.split << "]";
  for (double a : report.accuracies()) std::cout << " " << fscl::format_accuracy(a);
  std::cout << "\n";
}

int cmd_synth_gen(const GlobalOptions& g) {
  const auto cfg = resolve_config(g);
  fscl::require(cfg.dataset.synthetic.has_value(), fscl::ErrorCode::kInvalidArgument,
                "synth-gen needs a synthetic dataset section in the config");
  const auto data = fscl::load_data(cfg);
  fscl::write_feature_store(data.train, output_path(g, "train.fscl").string());
  fscl::write_feature_store(data.test, output_path(g, "test.fscl").string());
  write_json(output_path(g, "sessions.json"), json(cfg.sessions));
  std::cout << "wrote " << data.train.samples.size() << " train and " << data.test.samples.size()
            << " test samples to " << g.out_dir << "\n";
  return 0;
}

int cmd_train_base(const GlobalOptions& g) {
  const auto cfg = resolve_config(g);
  const auto data = fscl::load_data(cfg);
  const auto splits = fscl::prepare_splits(cfg, data);
  const bool disable_scl = cfg.ablation.disable_scl || cfg.method == fscl::Method::kFinetune;
  const auto result = fscl::train_base(cfg, splits.base_train, disable_scl);
  fscl::save_encoder(result.params, output_path(g, "encoder.fscm").string());
  json history = json::array();
  for (std::size_t e = 0; e < result.loss_history.size(); ++e) {
    const auto& l = result.loss_history[e];
    history.push_back({{"epoch", e}, {"total", l.total}, {"ce", l.ce}, {"scl", l.scl}});
  }
  write_json(output_path(g, "base_training.json"),
             {{"disable_scl", disable_scl}, {"epochs", result.loss_history.size()}, {"loss_history", history}});
  if (!result.loss_history.empty()) {
    const auto& last = result.loss_history.back();
    std::cout << "final epoch loss total=" << last.total << " ce=" << last.ce << " scl=" << last.scl << "\n";
  }
  return 0;
}

int cmd_run_sessions(const GlobalOptions& g, const std::string& encoder_path) {
  const auto cfg = resolve_config(g);
  const auto data = fscl::load_data(cfg);
  const auto splits = fscl::prepare_splits(cfg, data);
  std::optional<fscl::EncoderParams> pretrained;
  if (!encoder_path.empty()) pretrained = fscl::load_encoder(encoder_path);
  auto result = fscl::run_experiment(cfg, splits, pretrained ? &*pretrained : nullptr);

  write_json(output_path(g, "report.json"), fscl::report_to_json(result.report));
  write_json(output_path(g, "timing.json"), fscl::timing_to_json(result.report));
  write_text(output_path(g, "accuracy.csv"), fscl::accuracy_table_csv({{result.report.method, result.report}}));
  if (!pretrained) fscl::save_encoder(result.encoder, output_path(g, "encoder.fscm").string());
  if (result.classifier && !result.classifier->use_ncm) {
    fscl::save_classifier(result.classifier->acc, output_path(g, "classifier.fscm").string());
  }
  print_summary(result.report.method, result.report);
  return 0;
}

int cmd_eval(const GlobalOptions& g, const std::string& encoder_path, const std::string& classifier_path,
             const std::string& dataset_path) {
  const auto encoder = fscl::load_encoder(encoder_path);
  const auto classifier = fscl::load_classifier(classifier_path);
  std::set<std::uint32_t> known;
  for (const auto& [id, model] : classifier.models()) known.insert(id);

  fscl::Dataset test;
  if (!dataset_path.empty()) {
    test = fscl::load_feature_store(dataset_path, fscl::Split::kTest);
  } else {
    test = fscl::load_data(resolve_config(g)).test;
  }
  // Cumulative protocol: only classes the classifier knows are scored.
  test = test.subset(known);
  const auto top1 = fscl::evaluate_top1(
      [&](const fscl::FeatureMap& fm) { return fscl::predict(fm, encoder, classifier).label; }, test);
  json per_class = json::object();
  for (const auto& [id, t] : top1.per_class) {
    per_class[std::to_string(id)] = {{"correct", t.correct}, {"total", t.total}, {"accuracy", t.accuracy()}};
  }
  write_json(output_path(g, "eval.json"),
             {{"top1", top1.accuracy}, {"test_samples", test.samples.size()}, {"per_class", per_class}});
  std::cout << "top1 " << fscl::format_accuracy(top1.accuracy) << " over " << test.samples.size() << " samples\n";
  return 0;
}

int cmd_export(const GlobalOptions& g, const std::string& encoder_path, const std::string& dataset_path,
               const std::string& output) {
  const auto encoder = fscl::load_encoder(encoder_path);
  fscl::Dataset data;
  if (!dataset_path.empty()) {
    data = fscl::load_feature_store(dataset_path);
  } else {
    const auto cfg = resolve_config(g);
    data = fscl::prepare_splits(cfg, fscl::load_data(cfg)).base_test;
  }
  const auto path = output.empty() ? output_path(g, "embeddings.csv") : fs::path(output);
  fscl::export_embeddings(encoder, data, path.string());
  std::cout << "wrote " << data.samples.size() << " embeddings to " << path.string() << "\n";
  return 0;
}

int cmd_ablate(const GlobalOptions& g) {
  const auto cfg = resolve_config(g);
  const auto data = fscl::load_data(cfg);
  const auto splits = fscl::prepare_splits(cfg, data);
  const auto result = fscl::run_ablation(cfg, splits);
  write_json(output_path(g, "ablation.json"), fscl::ablation_to_json(result));
  write_text(output_path(g, "ablation.csv"), fscl::accuracy_table_csv(result.variants));
  for (const auto& [name, report] : result.variants) print_summary(name, report);
  std::cout << "max |Sigma_a(adaptive) - Sigma_a(alpha=1)|_F = " << result.sigma_a_max_difference << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot class-incremental learning with contrastive pre-training and an adaptive covariance classifier"};
  app.require_subcommand(1);

  GlobalOptions g;
  app.add_option("--config", g.config_path, "Experiment config (JSON); desk defaults when omitted");
  app.add_option("--seed", g.seed, "Master seed, overrides every seed in the config");
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();

  auto* synth = app.add_subcommand("synth-gen", "Write the synthetic train/test feature stores and session spec");
  auto* train = app.add_subcommand("train-base", "Train the encoder on the base session");

  std::string encoder_path, classifier_path, dataset_path, output;
  auto* run = app.add_subcommand("run-sessions", "Run base + incremental sessions for the configured method");
  run->add_option("--encoder", encoder_path, "Use a trained encoder checkpoint instead of training");

  auto* eval = app.add_subcommand("eval", "Evaluate a saved encoder + classifier on a test set");
  eval->add_option("--encoder", encoder_path, "Encoder checkpoint")->required();
  eval->add_option("--classifier", classifier_path, "Classifier checkpoint")->required();
  eval->add_option("--dataset", dataset_path, "Feature store to evaluate (default: config test split)");

  auto* exp = app.add_subcommand("export-embeddings", "Write embeddings as CSV for external plotting");
  exp->add_option("--encoder", encoder_path, "Encoder checkpoint")->required();
  exp->add_option("--dataset", dataset_path, "Feature store (default: base test split from the config)");
  exp->add_option("--output", output, "CSV path (default: <out-dir>/embeddings.csv)");

  auto* ablate = app.add_subcommand("ablate", "Run the ours / w/o SCL / w/o ACC / alpha=1 matrix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) return cmd_synth_gen(g);
    if (*train) return cmd_train_base(g);
    if (*run) return cmd_run_sessions(g, encoder_path);
    if (*eval) return cmd_eval(g, encoder_path, classifier_path, dataset_path);
    if (*exp) return cmd_export(g, encoder_path, dataset_path, output);
    if (*ablate) return cmd_ablate(g);
  } catch (const fscl::Error& e) {
    std::cerr << json{{"error", {{"code", fscl::to_string(e.code())}, {"message", e.what()}}}}.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << "\n";
    return 3;
  }
  return 1;
}
