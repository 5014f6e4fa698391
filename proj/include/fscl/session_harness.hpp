#pragma once

// End-to-end protocol: base-phase training, frozen-extractor incremental
// sessions with cumulative top-1 evaluation, the finetune and NCM baselines,
// the ablation matrix, and report serialization.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fscl/acc_classifier.hpp"
#include "fscl/contrastive_loss.hpp"
#include "fscl/encoder.hpp"
#include "fscl/error.hpp"
#include "fscl/feature_augment.hpp"
#include "fscl/feature_store.hpp"
#include "fscl/random.hpp"

namespace fscl {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct OptimizerConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  std::uint32_t epochs = 200;
  std::uint32_t batch_size = 256;
};

struct ContrastiveConfig {
  double temperature = 0.07;
  std::uint32_t queue_capacity = 1024;
  double key_momentum = 0.99;
};

struct AccConfig {
  double lambda = 0.2;
  double k = 4.0;
  double epsilon = 1e-6;
  AlphaReduction alpha_reduction = AlphaReduction::kSumOverDims;
};

inline std::string to_string(AlphaReduction r) {
  return r == AlphaReduction::kSumOverDims ? "sum" : "mean";
}

inline AlphaReduction alpha_reduction_from_string(const std::string& s) {
  if (s == "mean") return AlphaReduction::kMeanOverDims;
  if (s == "sum") return AlphaReduction::kSumOverDims;
  fail(ErrorCode::kInvalidArgument, "unknown alpha_reduction \"" + s + "\" (expected mean or sum)");
}

struct AblationFlags {
  bool disable_scl = false;
  bool disable_acc = false;
  std::optional<double> fixed_alpha;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct FinetuneConfig {
  std::uint32_t epochs = 20;
  double learning_rate = 0.1;
};

enum class Method { kOurs, kFinetune, kNcm };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kOurs: return "ours";
    case Method::kFinetune: return "finetune";
    case Method::kNcm: return "ncm";
  }
  return "unknown";
}

inline Method method_from_string(const std::string& s) {
  if (s == "ours") return Method::kOurs;
  if (s == "finetune") return Method::kFinetune;
  if (s == "ncm") return Method::kNcm;
  fail(ErrorCode::kInvalidArgument, "unknown method \"" + s + "\" (expected ours, finetune or ncm)");
}

/// Either a synthetic generator or a pair of feature-store files.
struct DatasetSource {
  std::optional<SynthSpec> synthetic;  // per_class is the train count
  std::uint32_t synthetic_test_per_class = 50;
  std::string train_path;
  std::string test_path;
};

struct ExperimentConfig {
  DatasetSource dataset;
  SessionSpec sessions;
  EncoderConfig encoder;
  OptimizerConfig optimizer;
  ContrastiveConfig contrastive;
  AugmentPolicy augment;
  AccConfig acc;
  AblationFlags ablation;
  Method method = Method::kOurs;
  FinetuneConfig finetune;
  std::uint64_t seed = 0;

  /// Small synthetic 8 + 3x2-way 5-shot benchmark sized for CI.
  static ExperimentConfig desk_default() {
    ExperimentConfig c;
    SynthSpec synth;
    synth.n_classes = 14;
    synth.per_class = 200;
    synth.shape = TensorShape{16, 8, 8};
    synth.mean_separation = 1.0;
    synth.noise_sd = 1.0;
    synth.scale_spread = 0.5;
    c.dataset.synthetic = synth;
    c.dataset.synthetic_test_per_class = 50;
    c.sessions = contiguous_session_spec(8, 3, 2, 5, 0);
    c.optimizer.epochs = 30;
    c.optimizer.batch_size = 64;
    c.optimizer.learning_rate = 0.05;
    return c;
  }

  /// Propagates the master seed into every derived seed.
  void set_seed(std::uint64_t s) {
    seed = s;
    sessions.seed = s;
    if (dataset.synthetic) dataset.synthetic->seed = s;
  }

  void validate() const {
    require(optimizer.batch_size >= 1, ErrorCode::kInvalidArgument, "batch_size must be >= 1");
    require(optimizer.learning_rate >= 0.0, ErrorCode::kInvalidArgument, "learning_rate must be >= 0");
    require(contrastive.temperature > 0.0, ErrorCode::kInvalidArgument, "temperature must be positive");
    require(contrastive.key_momentum >= 0.0 && contrastive.key_momentum <= 1.0, ErrorCode::kInvalidArgument,
            "key_momentum must be in [0, 1]");
    require(acc.k > 1.0, ErrorCode::kInvalidArgument, "acc.k must be > 1");
    require(acc.epsilon > 0.0, ErrorCode::kInvalidArgument, "acc.epsilon must be positive");
    require(!sessions.base_classes.empty(), ErrorCode::kInvalidArgument, "base_classes must be non-empty");
    require(dataset.synthetic.has_value() || (!dataset.train_path.empty() && !dataset.test_path.empty()),
            ErrorCode::kInvalidArgument, "dataset needs either \"synthetic\" or train_path and test_path");
    if (ablation.fixed_alpha) {
      require(*ablation.fixed_alpha >= 0.0, ErrorCode::kInvalidArgument, "fixed_alpha must be >= 0");
    }
    augment.validate();
  }

  /// The effective classifier for frozen-extractor methods.
  bool uses_ncm() const { return method == Method::kNcm || ablation.disable_acc; }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json dataset;
  if (c.dataset.synthetic) {
    nlohmann::json synth = *c.dataset.synthetic;
    synth["train_per_class"] = c.dataset.synthetic->per_class;
    synth["test_per_class"] = c.dataset.synthetic_test_per_class;
    synth.erase("per_class");
    dataset["synthetic"] = synth;
  } else {
    dataset["train_path"] = c.dataset.train_path;
    dataset["test_path"] = c.dataset.test_path;
  }
  j = nlohmann::json{
      {"dataset", dataset},
      {"sessions", c.sessions},
      {"encoder", c.encoder},
      {"optimizer",
       {{"learning_rate", c.optimizer.learning_rate},
        {"momentum", c.optimizer.momentum},
        {"epochs", c.optimizer.epochs},
        {"batch_size", c.optimizer.batch_size}}},
      {"contrastive",
       {{"temperature", c.contrastive.temperature},
        {"queue_capacity", c.contrastive.queue_capacity},
        {"key_momentum", c.contrastive.key_momentum}}},
      {"augment", c.augment},
      {"acc",
       {{"lambda", c.acc.lambda},
        {"k", c.acc.k},
        {"epsilon", c.acc.epsilon},
        {"alpha_reduction", to_string(c.acc.alpha_reduction)}}},
      {"ablation",
       {{"disable_scl", c.ablation.disable_scl},
        {"disable_acc", c.ablation.disable_acc},
        {"fixed_alpha", c.ablation.fixed_alpha ? nlohmann::json(*c.ablation.fixed_alpha) : nlohmann::json()}}},
      {"method", to_string(c.method)},
      {"finetune", {{"epochs", c.finetune.epochs}, {"learning_rate", c.finetune.learning_rate}}},
      {"seed", c.seed}};
}

/// Missing keys fall back to the desk defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c = ExperimentConfig::desk_default();
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (d.contains("synthetic")) {
      SynthSpec synth = *c.dataset.synthetic;
      const auto& s = d.at("synthetic");
      synth = s.get<SynthSpec>();
      synth.per_class = s.value("train_per_class", s.value("per_class", 200u));
      if (!s.contains("seed")) synth.seed = c.seed;
      c.dataset.synthetic = synth;
      c.dataset.synthetic_test_per_class = s.value("test_per_class", 50u);
    } else {
      c.dataset.synthetic.reset();
      c.dataset.train_path = d.at("train_path").get<std::string>();
      c.dataset.test_path = d.at("test_path").get<std::string>();
    }
  } else if (c.dataset.synthetic) {
    c.dataset.synthetic->seed = c.seed;
  }
  if (j.contains("sessions")) {
    c.sessions = j.at("sessions").get<SessionSpec>();
    if (!j.at("sessions").contains("seed")) c.sessions.seed = c.seed;
  } else {
    c.sessions.seed = c.seed;
  }
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
    c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
    c.optimizer.epochs = o.value("epochs", c.optimizer.epochs);
    c.optimizer.batch_size = o.value("batch_size", c.optimizer.batch_size);
  }
  if (j.contains("contrastive")) {
    const auto& o = j.at("contrastive");
    c.contrastive.temperature = o.value("temperature", c.contrastive.temperature);
    c.contrastive.queue_capacity = o.value("queue_capacity", c.contrastive.queue_capacity);
    c.contrastive.key_momentum = o.value("key_momentum", c.contrastive.key_momentum);
  }
  if (j.contains("augment")) c.augment = j.at("augment").get<AugmentPolicy>();
  if (j.contains("acc")) {
    const auto& o = j.at("acc");
    c.acc.lambda = o.value("lambda", c.acc.lambda);
    c.acc.k = o.value("k", c.acc.k);
    c.acc.epsilon = o.value("epsilon", c.acc.epsilon);
    if (o.contains("alpha_reduction")) {
      c.acc.alpha_reduction = alpha_reduction_from_string(o.at("alpha_reduction").get<std::string>());
    }
  }
  if (j.contains("ablation")) {
    const auto& o = j.at("ablation");
    c.ablation.disable_scl = o.value("disable_scl", false);
    c.ablation.disable_acc = o.value("disable_acc", false);
    if (o.contains("fixed_alpha") && !o.at("fixed_alpha").is_null()) {
      c.ablation.fixed_alpha = o.at("fixed_alpha").get<double>();
    }
  }
  if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
  if (j.contains("finetune")) {
    const auto& o = j.at("finetune");
    c.finetune.epochs = o.value("epochs", c.finetune.epochs);
    c.finetune.learning_rate = o.value("learning_rate", c.finetune.learning_rate);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidArgument, "config is not valid JSON: " + std::string(e.what()));
  }
  try {
    return config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidArgument, "bad config value: " + std::string(e.what()));
  }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct TrainTestData {
  Dataset train;
  Dataset test;
};

inline TrainTestData load_data(const ExperimentConfig& config) {
  if (config.dataset.synthetic) {
    SynthSpec spec = *config.dataset.synthetic;
    Dataset train = synth_gaussian_dataset(spec, Split::kTrain);
    spec.per_class = config.dataset.synthetic_test_per_class;
    Dataset test = synth_gaussian_dataset(spec, Split::kTest);
    return {std::move(train), std::move(test)};
  }
  return {load_feature_store(config.dataset.train_path, Split::kTrain),
          load_feature_store(config.dataset.test_path, Split::kTest)};
}

inline SessionSplits prepare_splits(const ExperimentConfig& config, const TrainTestData& data) {
  return make_session_splits(data.train, data.test, config.sessions);
}

/// Class id <-> classifier column, in order of first appearance.
class LabelIndex {
 public:
  explicit LabelIndex(const std::vector<std::uint32_t>& classes = {}) { append(classes); }

  void append(const std::vector<std::uint32_t>& classes) {
    for (auto c : classes) {
      require(!column_of_.contains(c), ErrorCode::kOverlappingClasses, "class listed twice");
      column_of_[c] = static_cast<std::uint32_t>(classes_.size());
      classes_.push_back(c);
    }
  }

  std::uint32_t column(std::uint32_t class_id) const {
    auto it = column_of_.find(class_id);
    require(it != column_of_.end(), ErrorCode::kLabelOutOfRange, "class " + std::to_string(class_id) + " not indexed");
    return it->second;
  }
  std::uint32_t class_id(std::uint32_t column) const { return classes_.at(column); }
  std::size_t size() const { return classes_.size(); }

 private:
  std::map<std::uint32_t, std::uint32_t> column_of_;
  std::vector<std::uint32_t> classes_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct ClassTally {
  std::uint64_t correct = 0;
  std::uint64_t total = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

struct Top1Result {
  double accuracy = 0.0;
  std::map<std::uint32_t, ClassTally> per_class;

  /// Pooled accuracy over the samples of the given classes.
  std::optional<double> accuracy_over(const std::set<std::uint32_t>& classes) const {
    ClassTally t;
    for (const auto& [id, tally] : per_class) {
      if (classes.contains(id)) {
        t.correct += tally.correct;
        t.total += tally.total;
      }
    }
    if (t.total == 0) return std::nullopt;
    return t.accuracy();
  }
};

using Predictor = std::function<std::uint32_t(const FeatureMap&)>;

inline Top1Result evaluate_top1(const Predictor& predict_fn, const Dataset& test) {
  require(!test.samples.empty(), ErrorCode::kEmpty, "test set is empty");
  Top1Result r;
  std::uint64_t correct = 0;
  for (const auto& s : test.samples) {
    auto& tally = r.per_class[s.label];
    ++tally.total;
    if (predict_fn(s.feature) == s.label) {
      ++tally.correct;
      ++correct;
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(test.samples.size());
  return r;
}

inline std::map<std::uint32_t, std::vector<Vector>> embeddings_by_class(const EncoderParams& params,
                                                                        const Dataset& data) {
  std::map<std::uint32_t, std::vector<Vector>> out;
  for (const auto& s : data.samples) out[s.label].push_back(embed(params, s.feature));
  return out;
}

// ---------------------------------------------------------------------------
// Base-phase training
// ---------------------------------------------------------------------------

struct BaseTrainingResult {
  EncoderParams params;
  std::vector<LossBreakdown> loss_history;  // per epoch, sample-weighted mean
  LabelIndex labels;
};

/// SGD with momentum and a per-epoch cosine schedule on the combined loss.
/// With `disable_scl` the key network, queue and contrastive term are unused.
inline BaseTrainingResult train_base(const ExperimentConfig& config, const Dataset& base_train, bool disable_scl) {
  require(!base_train.samples.empty(), ErrorCode::kEmpty, "base training set is empty");
  BaseTrainingResult result;
  result.labels = LabelIndex(config.sessions.base_classes);

  EncoderConfig enc = config.encoder;
  enc.input_channels = base_train.shape.channels;
  enc.num_classes = static_cast<std::uint32_t>(config.sessions.base_classes.size());
  enc.init_seed = mix_seed(config.seed, 1);
  result.params = init_encoder(enc);

  const std::uint32_t epochs = config.optimizer.epochs;
  if (epochs == 0) return result;

  EncoderParams& params = result.params;
  OptimizerState state = make_optimizer(params, config.optimizer.momentum, config.optimizer.learning_rate);
  KeyQueue queue(config.contrastive.queue_capacity);
  const LossOptions loss_options{config.contrastive.temperature, disable_scl};
  Rng rng(mix_seed(config.seed, 2));

  std::vector<std::size_t> order(base_train.samples.size());
  const std::size_t batch_size = config.optimizer.batch_size;
  for (std::uint32_t epoch = 0; epoch < epochs; ++epoch) {
    state.learning_rate = cosine_lr(epoch, epochs, config.optimizer.learning_rate);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());

    LossBreakdown epoch_loss;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      std::vector<TrainingExample> batch;
      std::vector<std::uint32_t> columns;
      batch.reserve(end - start);
      for (std::size_t n = start; n < end; ++n) {
        const auto& sample = base_train.samples[order[n]];
        ViewPair views = sample_view_pair(sample.feature, config.augment, rng);
        const auto column = result.labels.column(sample.label);
        batch.push_back({std::move(views.query), std::move(views.key), column});
        columns.push_back(column);
      }
      StepResult step;
      try {
        step = backward(params, batch, queue, loss_options);
      } catch (const Error& e) {
        fail(e.code(), "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) + ": " + e.what());
      }
      if (!std::isfinite(step.loss.total)) {
        fail(ErrorCode::kNonFinite, "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                        std::to_string(batch_index));
      }
      sgd_step(params, step.gradients, state);
      if (!disable_scl) {
        momentum_update(params, config.contrastive.key_momentum);
        queue_push(queue, step.keys, columns);
      }
      const double w = static_cast<double>(end - start) / static_cast<double>(order.size());
      epoch_loss.total += w * step.loss.total;
      epoch_loss.ce += w * step.loss.ce;
      epoch_loss.scl += w * step.loss.scl;
    }
    result.loss_history.push_back(epoch_loss);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct SessionRecord {
  std::uint32_t session = 0;
  std::vector<std::uint32_t> classes_seen;
  std::vector<std::uint32_t> new_classes;
  Top1Result top1;
  std::optional<double> old_class_top1;
  std::optional<double> new_class_top1;
  std::optional<double> linear_head_top1;  // session 0 of frozen-extractor methods
  double wall_clock_ms = 0.0;              // excluded from the deterministic report
};

struct SessionReport {
  std::string method;
  AblationFlags flags;
  std::string split;
  std::vector<SessionRecord> sessions;
  std::vector<LossBreakdown> base_loss_history;

  std::vector<double> accuracies() const {
    std::vector<double> out;
    for (const auto& s : sessions) out.push_back(s.top1.accuracy);
    return out;
  }
};

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json();
}

/// Deterministic content only; timings go through timing_to_json.
inline nlohmann::json report_to_json(const SessionReport& r) {
  nlohmann::json sessions = nlohmann::json::array();
  for (const auto& s : r.sessions) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [id, t] : s.top1.per_class) {
      per_class[std::to_string(id)] = {{"correct", t.correct}, {"total", t.total}, {"accuracy", t.accuracy()}};
    }
    std::uint64_t total = 0;
    for (const auto& [id, t] : s.top1.per_class) total += t.total;
    nlohmann::json rec{{"session", s.session},
                       {"classes_seen", s.classes_seen},
                       {"new_classes", s.new_classes},
                       {"test_samples", total},
                       {"top1", s.top1.accuracy},
                       {"old_class_top1", optional_json(s.old_class_top1)},
                       {"new_class_top1", optional_json(s.new_class_top1)},
                       {"per_class", per_class}};
    if (s.linear_head_top1) rec["linear_head_top1"] = *s.linear_head_top1;
    sessions.push_back(std::move(rec));
  }
  nlohmann::json history = nlohmann::json::array();
  for (std::size_t e = 0; e < r.base_loss_history.size(); ++e) {
    const auto& l = r.base_loss_history[e];
    history.push_back({{"epoch", e}, {"total", l.total}, {"ce", l.ce}, {"scl", l.scl}});
  }
  return nlohmann::json{{"method", r.method},
                        {"ablation",
                         {{"disable_scl", r.flags.disable_scl},
                          {"disable_acc", r.flags.disable_acc},
                          {"fixed_alpha", optional_json(r.flags.fixed_alpha)}}},
                        {"split", r.split},
                        {"sessions", sessions},
                        {"base_training", {{"epochs", r.base_loss_history.size()}, {"loss_history", history}}}};
}

inline nlohmann::json timing_to_json(const SessionReport& r) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : r.sessions) out.push_back({{"session", s.session}, {"wall_clock_ms", s.wall_clock_ms}});
  return out;
}

inline std::string format_accuracy(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// One row per report: name, then cumulative top-1 per session.
inline std::string accuracy_table_csv(const std::vector<std::pair<std::string, SessionReport>>& rows) {
  std::size_t columns = 0;
  for (const auto& [name, r] : rows) columns = std::max(columns, r.sessions.size());
  std::string out = "method";
  for (std::size_t s = 0; s < columns; ++s) out += ",session_" + std::to_string(s);
  out += "\n";
  for (const auto& [name, r] : rows) {
    out += name;
    for (double a : r.accuracies()) out += "," + format_accuracy(a);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Incremental sessions with a frozen extractor
// ---------------------------------------------------------------------------

/// Either classifier behind one interface; which one is used follows the
/// ablation flags.
struct FrozenClassifier {
  bool use_ncm = false;
  AccClassifier acc;
  NcmClassifier ncm;

  void add_class(std::uint32_t id, const std::vector<Vector>& embeddings) {
    if (use_ncm) {
      ncm.add_class(id, embeddings);
    } else {
      acc.add_class(id, embeddings);
    }
  }

  std::uint32_t predict(const Vector& embedding) const {
    return use_ncm ? ncm.predict(embedding).label : acc.predict(embedding).label;
  }
};

inline FrozenClassifier make_frozen_classifier(const ExperimentConfig& config) {
  FrozenClassifier c;
  c.use_ncm = config.uses_ncm();
  c.acc = AccClassifier(GaussianizeConfig{config.acc.lambda, config.acc.epsilon}, config.acc.k,
                        config.ablation.fixed_alpha, config.acc.alpha_reduction);
  return c;
}

inline SessionRecord make_record(std::uint32_t session, const std::set<std::uint32_t>& seen,
                                 const std::vector<std::uint32_t>& new_classes,
                                 const std::set<std::uint32_t>& base, Top1Result top1) {
  SessionRecord rec;
  rec.session = session;
  rec.classes_seen.assign(seen.begin(), seen.end());
  rec.new_classes = new_classes;
  rec.old_class_top1 = top1.accuracy_over(base);
  if (!new_classes.empty()) {
    rec.new_class_top1 = top1.accuracy_over(std::set<std::uint32_t>(new_classes.begin(), new_classes.end()));
  }
  rec.top1 = std::move(top1);
  return rec;
}

/// Fits the base classes on all base training samples, then each session's
/// new classes on their K shots, evaluating cumulative top-1 after every
/// session. `classifier_out` receives the final classifier when non-null.
inline SessionReport run_incremental(const EncoderParams& params, const SessionSplits& splits,
                                     const ExperimentConfig& config, FrozenClassifier* classifier_out = nullptr) {
  using Clock = std::chrono::steady_clock;
  SessionReport report;
  report.method = config.uses_ncm() ? "ncm" : "ours";
  report.flags = config.ablation;
  report.split = config.sessions.descriptor();

  const std::set<std::uint32_t> base(config.sessions.base_classes.begin(), config.sessions.base_classes.end());
  FrozenClassifier classifier = make_frozen_classifier(config);
  auto predictor = [&](const FeatureMap& fm) { return classifier.predict(embed(params, fm)); };

  auto t0 = Clock::now();
  auto base_embeddings = embeddings_by_class(params, splits.base_train);
  for (auto c : config.sessions.base_classes) {
    require(base_embeddings.contains(c), ErrorCode::kInsufficientSamples,
            "base class " + std::to_string(c) + " has no training samples");
    try {
      classifier.add_class(c, base_embeddings.at(c));
    } catch (const Error& e) {
      fail(e.code(), "fitting base class " + std::to_string(c) + ": " + e.what());
    }
  }
  std::set<std::uint32_t> seen = base;
  SessionRecord rec0 = make_record(0, seen, {}, base, evaluate_top1(predictor, splits.base_test));
  if (params.num_classes() == base.size()) {
    const LabelIndex labels(config.sessions.base_classes);
    auto linear = [&](const FeatureMap& fm) {
      Eigen::Index best = 0;
      classify_logits(params, embed(params, fm)).maxCoeff(&best);
      return labels.class_id(static_cast<std::uint32_t>(best));
    };
    rec0.linear_head_top1 = evaluate_top1(linear, splits.base_test).accuracy;
  }
  rec0.wall_clock_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  report.sessions.push_back(std::move(rec0));

  for (std::size_t b = 0; b < splits.incremental.size(); ++b) {
    t0 = Clock::now();
    const auto& session = splits.incremental[b];
    auto shots = embeddings_by_class(params, session.train);
    for (auto c : session.classes) {
      try {
        classifier.add_class(c, shots.at(c));
      } catch (const Error& e) {
        fail(e.code(), "session " + std::to_string(b + 1) + ", class " + std::to_string(c) + ": " + e.what());
      }
      seen.insert(c);
    }
    SessionRecord rec = make_record(static_cast<std::uint32_t>(b + 1), seen, session.classes, base,
                                    evaluate_top1(predictor, session.test_cumulative));
    rec.wall_clock_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    report.sessions.push_back(std::move(rec));
  }
  if (classifier_out) *classifier_out = std::move(classifier);
  return report;
}

// ---------------------------------------------------------------------------
// Finetune baseline
// ---------------------------------------------------------------------------

/// Grows the linear head per session and fine-tunes encoder + head on that
/// session's K-shot data only, with cross-entropy. Prediction is argmax over
/// every head column seen so far.
inline SessionReport finetune_baseline(EncoderParams params, const SessionSplits& splits,
                                       const ExperimentConfig& config) {
  using Clock = std::chrono::steady_clock;
  SessionReport report;
  report.method = "finetune";
  report.flags = AblationFlags{true, true, std::nullopt};
  report.split = config.sessions.descriptor();

  const std::set<std::uint32_t> base(config.sessions.base_classes.begin(), config.sessions.base_classes.end());
  LabelIndex labels(config.sessions.base_classes);
  require(params.num_classes() == labels.size(), ErrorCode::kShapeMismatch,
          "encoder head does not match the base class count");
  auto predictor = [&](const FeatureMap& fm) {
    Eigen::Index best = 0;
    classify_logits(params, embed(params, fm)).maxCoeff(&best);
    return labels.class_id(static_cast<std::uint32_t>(best));
  };

  auto t0 = Clock::now();
  std::set<std::uint32_t> seen = base;
  SessionRecord rec0 = make_record(0, seen, {}, base, evaluate_top1(predictor, splits.base_test));
  rec0.linear_head_top1 = rec0.top1.accuracy;
  rec0.wall_clock_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  report.sessions.push_back(std::move(rec0));

  const LossOptions ce_only{config.contrastive.temperature, true};
  for (std::size_t b = 0; b < splits.incremental.size(); ++b) {
    t0 = Clock::now();
    const auto& session = splits.incremental[b];
    labels.append(session.classes);
    grow_classifier(params, static_cast<std::uint32_t>(session.classes.size()), mix_seed(config.seed, 100 + b));
    for (auto c : session.classes) seen.insert(c);

    std::vector<TrainingExample> batch;
    for (const auto& s : session.train.samples) batch.push_back({s.feature, FeatureMap{}, labels.column(s.label)});
    OptimizerState state = make_optimizer(params, config.optimizer.momentum, config.finetune.learning_rate);
    const KeyQueue unused_queue(0);
    for (std::uint32_t epoch = 0; epoch < config.finetune.epochs; ++epoch) {
      StepResult step = backward(params, batch, unused_queue, ce_only);
      if (!std::isfinite(step.loss.total)) {
        fail(ErrorCode::kNonFinite, "finetune diverged in session " + std::to_string(b + 1));
      }
      sgd_step(params, step.gradients, state);
    }
    SessionRecord rec = make_record(static_cast<std::uint32_t>(b + 1), seen, session.classes, base,
                                    evaluate_top1(predictor, session.test_cumulative));
    rec.wall_clock_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    report.sessions.push_back(std::move(rec));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Whole experiments
// ---------------------------------------------------------------------------

struct ExperimentResult {
  SessionReport report;
  EncoderParams encoder;
  std::optional<FrozenClassifier> classifier;  // frozen-extractor methods only
};

/// Trains (unless `pretrained` is given) and runs the configured method.
inline ExperimentResult run_experiment(const ExperimentConfig& config, const SessionSplits& splits,
                                       const EncoderParams* pretrained = nullptr) {
  ExperimentResult out;
  std::vector<LossBreakdown> history;
  if (pretrained) {
    out.encoder = *pretrained;
  } else {
    // The finetune baseline uses no continual-learning machinery, so its base
    // phase is cross-entropy only.
    const bool disable_scl = config.ablation.disable_scl || config.method == Method::kFinetune;
    BaseTrainingResult base = train_base(config, splits.base_train, disable_scl);
    out.encoder = std::move(base.params);
    history = std::move(base.loss_history);
  }
  if (config.method == Method::kFinetune) {
    out.report = finetune_baseline(out.encoder, splits, config);
  } else {
    FrozenClassifier classifier;
    out.report = run_incremental(out.encoder, splits, config, &classifier);
    out.classifier = std::move(classifier);
  }
  out.report.base_loss_history = std::move(history);
  return out;
}

struct AblationResult {
  std::vector<std::pair<std::string, SessionReport>> variants;
  double sigma_a_max_difference = 0.0;  // adaptive vs alpha = 1, max Frobenius norm over classes
};

/// Ours, w/o SCL, w/o ACC and alpha = 1 from a single config. Variants that
/// share the contrastive encoder reuse one training run.
inline AblationResult run_ablation(const ExperimentConfig& config, const SessionSplits& splits) {
  ExperimentConfig base_cfg = config;
  base_cfg.method = Method::kOurs;
  base_cfg.ablation = AblationFlags{};

  AblationResult out;
  BaseTrainingResult scl_encoder = train_base(base_cfg, splits.base_train, false);

  auto frozen = [&](const std::string& name, AblationFlags flags, const BaseTrainingResult& encoder) {
    ExperimentConfig cfg = base_cfg;
    cfg.ablation = flags;
    FrozenClassifier classifier;
    SessionReport report = run_incremental(encoder.params, splits, cfg, &classifier);
    report.base_loss_history = encoder.loss_history;
    out.variants.emplace_back(name, std::move(report));
    return classifier;
  };

  FrozenClassifier adaptive = frozen("ours", AblationFlags{}, scl_encoder);
  {
    ExperimentConfig ce_cfg = base_cfg;
    ce_cfg.ablation.disable_scl = true;
    BaseTrainingResult ce_encoder = train_base(ce_cfg, splits.base_train, true);
    frozen("ours_wo_scl", AblationFlags{true, false, std::nullopt}, ce_encoder);
  }
  frozen("ours_wo_acc", AblationFlags{false, true, std::nullopt}, scl_encoder);
  FrozenClassifier fixed = frozen("ours_alpha_1", AblationFlags{false, false, 1.0}, scl_encoder);

  for (const auto& [id, model] : adaptive.acc.models()) {
    const auto& other = fixed.acc.models().at(id);
    out.sigma_a_max_difference = std::max(out.sigma_a_max_difference, (model.adapted - other.adapted).norm());
  }
  return out;
}

inline nlohmann::json ablation_to_json(const AblationResult& r) {
  nlohmann::json variants = nlohmann::json::object();
  for (const auto& [name, report] : r.variants) variants[name] = report_to_json(report);
  return nlohmann::json{{"variants", variants}, {"sigma_a_max_frobenius_difference", r.sigma_a_max_difference}};
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

inline std::string format_coordinate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// CSV: header "label,e0,...,e{d-1}", one row per sample.
inline void export_embeddings(const EncoderParams& params, const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot open for writing: " + path);
  out << "label";
  for (std::uint32_t i = 0; i < params.embedding_dim(); ++i) out << ",e" << i;
  out << "\n";
  for (const auto& s : dataset.samples) {
    const Vector e = embed(params, s.feature);
    out << s.label;
    for (Eigen::Index i = 0; i < e.size(); ++i) out << "," << format_coordinate(e(i));
    out << "\n";
  }
  if (!out) fail(ErrorCode::kIo, "write failed: " + path);
}

}  // namespace fscl
