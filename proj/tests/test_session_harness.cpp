#include <algorithm>
#include <map>
#include <set>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace fscl;
using fscl::testing::code_of;
using fscl::testing::TempDir;
using fscl::testing::tiny_config;

namespace {

struct Prepared {
  ExperimentConfig config;
  SessionSplits splits;
};

Prepared prepared(std::uint64_t seed = 0) {
  Prepared p{tiny_config(seed), {}};
  p.splits = prepare_splits(p.config, load_data(p.config));
  return p;
}

std::vector<Matrix> tensors_of(const EncoderParams& p) {
  std::vector<Matrix> out;
  for_each_tensor(p, [&](const std::string&, const Matrix& t) { out.push_back(t); });
  return out;
}

Dataset labelled(const std::vector<std::uint32_t>& labels, std::uint32_t classes) {
  Dataset ds{classes, TensorShape{1, 1, 1}, Split::kTest, {}};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    // The single feature value encodes the sample index for the fixture predictor.
    ds.samples.push_back({FeatureMap(TensorShape{1, 1, 1}, {static_cast<float>(i)}), labels[i]});
  }
  return ds;
}

}  // namespace

TEST(TrainBase, ZeroEpochsReturnsInitialization) {
  auto p = prepared();
  p.config.optimizer.epochs = 0;
  const auto result = train_base(p.config, p.splits.base_train, false);
  EncoderConfig enc = p.config.encoder;
  enc.input_channels = 16;
  enc.num_classes = 4;
  enc.init_seed = mix_seed(p.config.seed, 1);
  EXPECT_EQ(tensors_of(result.params), tensors_of(init_encoder(enc)));
  EXPECT_TRUE(result.loss_history.empty());
}

TEST(TrainBase, DeterministicGivenSeed) {
  const auto p = prepared(3);
  const auto a = train_base(p.config, p.splits.base_train, false);
  const auto b = train_base(p.config, p.splits.base_train, false);
  ASSERT_EQ(a.loss_history.size(), 10u);
  for (std::size_t e = 0; e < a.loss_history.size(); ++e) {
    EXPECT_EQ(a.loss_history[e].total, b.loss_history[e].total);
    EXPECT_EQ(a.loss_history[e].scl, b.loss_history[e].scl);
  }
  EXPECT_EQ(tensors_of(a.params), tensors_of(b.params));
  EXPECT_GT(a.loss_history.front().scl, 0.0);

  auto other = p;
  other.config.set_seed(4);
  EXPECT_NE(train_base(other.config, p.splits.base_train, false).loss_history.front().total,
            a.loss_history.front().total);
}

TEST(TrainBase, DisableSclIsCrossEntropyOnly) {
  const auto p = prepared();
  const auto r = train_base(p.config, p.splits.base_train, true);
  for (const auto& l : r.loss_history) {
    EXPECT_EQ(l.scl, 0.0);
    EXPECT_EQ(l.total, l.ce);
  }
  auto zero = p.config;
  zero.optimizer.epochs = 0;
  const auto init = train_base(zero, p.splits.base_train, true);
  EXPECT_EQ(r.params.key.w1, init.params.key.w1);
  EXPECT_NE(r.params.query.w1, init.params.query.w1);
}

TEST(TrainBase, DivergenceNamesEpochAndBatch) {
  auto p = prepared();
  p.config.optimizer.learning_rate = 1e200;
  try {
    train_base(p.config, p.splits.base_train, true);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFinite);
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos);
  }
}

TEST(EvaluateTop1, OracleConstantAndHandTally) {
  const Dataset balanced = labelled({0, 1, 2, 3, 0, 1, 2, 3}, 4);
  const auto oracle = [&](const FeatureMap& fm) { return balanced.samples[static_cast<std::size_t>(fm.data[0])].label; };
  EXPECT_EQ(evaluate_top1(oracle, balanced).accuracy, 1.0);
  EXPECT_EQ(evaluate_top1([](const FeatureMap&) { return 2u; }, balanced).accuracy, 0.25);

  // 10-sample fixture; predicted labels written out by hand.
  const Dataset ten = labelled({0, 0, 0, 1, 1, 1, 1, 2, 2, 2}, 3);
  const std::vector<std::uint32_t> predicted{0, 1, 0, 1, 1, 0, 1, 2, 0, 2};
  const auto r = evaluate_top1([&](const FeatureMap& fm) { return predicted[static_cast<std::size_t>(fm.data[0])]; },
                               ten);
  // class 0: 2/3, class 1: 3/4, class 2: 2/3, overall 7/10
  EXPECT_DOUBLE_EQ(r.accuracy, 0.7);
  EXPECT_EQ(r.per_class.at(0).correct, 2u);
  EXPECT_EQ(r.per_class.at(1).correct, 3u);
  EXPECT_EQ(r.per_class.at(1).total, 4u);
  EXPECT_EQ(r.per_class.at(2).correct, 2u);
  EXPECT_DOUBLE_EQ(*r.accuracy_over({1, 2}), 5.0 / 7.0);
  EXPECT_FALSE(r.accuracy_over({9}).has_value());
  EXPECT_EQ(code_of([&] { evaluate_top1(oracle, Dataset{}); }), ErrorCode::kEmpty);
}

TEST(RunIncremental, ReportShapeAndCumulativeProtocol) {
  const auto p = prepared();
  const auto base = train_base(p.config, p.splits.base_train, false);
  const SessionReport r = run_incremental(base.params, p.splits, p.config);
  ASSERT_EQ(r.sessions.size(), 3u);
  std::uint64_t previous = 0;
  for (const auto& s : r.sessions) {
    EXPECT_GE(s.top1.accuracy, 0.0);
    EXPECT_LE(s.top1.accuracy, 1.0);
    std::uint64_t total = 0;
    for (const auto& [id, t] : s.top1.per_class) {
      total += t.total;
      EXPECT_NE(std::find(s.classes_seen.begin(), s.classes_seen.end(), id), s.classes_seen.end());
    }
    EXPECT_GT(total, previous);
    previous = total;
  }
  EXPECT_EQ(r.sessions[0].classes_seen.size(), 4u);
  EXPECT_EQ(r.sessions[2].classes_seen.size(), 6u);
  EXPECT_TRUE(r.sessions[0].linear_head_top1.has_value());
  EXPECT_TRUE(r.sessions[1].new_class_top1.has_value());

  auto no_sessions = p;
  no_sessions.config.sessions.sessions.clear();
  no_sessions.splits.incremental.clear();
  const SessionReport only = run_incremental(base.params, no_sessions.splits, no_sessions.config);
  ASSERT_EQ(only.sessions.size(), 1u);
  EXPECT_EQ(only.sessions[0].top1.accuracy, r.sessions[0].top1.accuracy);
}

TEST(RunIncremental, DisableAccUsesNcmOnRawEmbeddings) {
  auto p = prepared();
  const auto base = train_base(p.config, p.splits.base_train, false);
  p.config.ablation.disable_acc = true;
  FrozenClassifier classifier;
  const SessionReport r = run_incremental(base.params, p.splits, p.config, &classifier);
  EXPECT_EQ(r.method, "ncm");
  EXPECT_TRUE(classifier.use_ncm);
  const auto& last = p.splits.incremental.back();
  std::map<std::uint32_t, std::vector<Vector>> per_class = embeddings_by_class(base.params, p.splits.base_train);
  for (const auto& s : p.splits.incremental) {
    for (auto& [id, xs] : embeddings_by_class(base.params, s.train)) per_class[id] = xs;
  }
  for (const auto& s : last.test_cumulative.samples) {
    const Vector e = embed(base.params, s.feature);
    ASSERT_EQ(classifier.predict(e), ncm_fit_predict(per_class, e));
  }
}

TEST(Finetune, ZeroSessionsMatchesLinearHead) {
  auto p = prepared();
  p.config.method = Method::kFinetune;
  const auto base = train_base(p.config, p.splits.base_train, true);
  const SessionReport full = finetune_baseline(base.params, p.splits, p.config);
  ASSERT_EQ(full.sessions.size(), 3u);
  p.splits.incremental.clear();
  const SessionReport zero = finetune_baseline(base.params, p.splits, p.config);
  ASSERT_EQ(zero.sessions.size(), 1u);
  EXPECT_EQ(zero.sessions[0].top1.accuracy, *zero.sessions[0].linear_head_top1);
  EXPECT_EQ(zero.sessions[0].top1.accuracy, full.sessions[0].top1.accuracy);
}

TEST(Reports, DeterministicJsonWithoutTiming) {
  const auto p = prepared(2);
  const auto a = run_experiment(p.config, p.splits);
  const auto b = run_experiment(p.config, p.splits);
  const std::string ja = report_to_json(a.report).dump();
  EXPECT_EQ(ja, report_to_json(b.report).dump());
  EXPECT_EQ(ja.find("wall_clock"), std::string::npos);
  EXPECT_EQ(timing_to_json(a.report).size(), a.report.sessions.size());
  const std::string csv = accuracy_table_csv({{"ours", a.report}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,session_0,session_1,session_2");
}

TEST(Ablation, FourDistinctReportsSharingOneEncoder) {
  const auto p = prepared(1);
  const AblationResult r = run_ablation(p.config, p.splits);
  ASSERT_EQ(r.variants.size(), 4u);
  std::set<std::string> bodies;
  for (const auto& [name, report] : r.variants) bodies.insert(report_to_json(report).dump());
  EXPECT_EQ(bodies.size(), 4u);
  const auto& ours = r.variants[0].second;
  for (std::size_t i : {2u, 3u}) {
    ASSERT_EQ(r.variants[i].second.base_loss_history.size(), ours.base_loss_history.size());
    EXPECT_EQ(r.variants[i].second.base_loss_history.back().total, ours.base_loss_history.back().total);
  }
  EXPECT_EQ(r.variants[1].second.base_loss_history.back().scl, 0.0);
  EXPECT_GT(r.sigma_a_max_difference, 1e-6);
  EXPECT_EQ(ablation_to_json(r).dump(), ablation_to_json(run_ablation(p.config, p.splits)).dump());
}

TEST(ExportEmbeddings, CsvRoundTrip) {
  TempDir dir("export");
  const auto p = prepared();
  const auto base = train_base(p.config, p.splits.base_train, false);
  export_embeddings(base.params, p.splits.base_test, dir.file("e.csv"));
  std::ifstream in(dir.file("e.csv"));
  std::string line;
  std::string header = "label";
  for (int i = 0; i < 64; ++i) header += ",e" + std::to_string(i);
  std::getline(in, line);
  EXPECT_EQ(line, header);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    const auto& sample = p.splits.base_test.samples[rows];
    EXPECT_EQ(std::stoul(cell), sample.label);
    const Vector e = embed(base.params, sample.feature);
    for (Eigen::Index i = 0; std::getline(ss, cell, ','); ++i) {
      EXPECT_NEAR(std::stod(cell), e(i), 1e-8 * std::max(1.0, std::abs(e(i))));
    }
    ++rows;
  }
  EXPECT_EQ(rows, p.splits.base_test.samples.size());

  export_embeddings(base.params, Dataset{}, dir.file("empty.csv"));
  EXPECT_EQ(fscl::testing::slurp(dir.file("empty.csv")), header + "\n");
}

TEST(Config, JsonRoundTripAndDefaults) {
  ExperimentConfig c = tiny_config(9);
  c.ablation.fixed_alpha = 1.0;
  c.acc.alpha_reduction = AlphaReduction::kMeanOverDims;
  c.method = Method::kNcm;
  const nlohmann::json j = c;
  const ExperimentConfig back = config_from_json(j);
  EXPECT_EQ(nlohmann::json(back).dump(), j.dump());

  const ExperimentConfig defaults = config_from_json(nlohmann::json::object());
  EXPECT_EQ(nlohmann::json(defaults).dump(), nlohmann::json(ExperimentConfig::desk_default()).dump());
  EXPECT_EQ(defaults.acc.alpha_reduction, AlphaReduction::kSumOverDims);
  EXPECT_EQ(defaults.acc.lambda, 0.2);
  EXPECT_EQ(defaults.acc.k, 4.0);

  const ExperimentConfig seeded = config_from_json({{"seed", 12}});
  EXPECT_EQ(seeded.sessions.seed, 12u);
  EXPECT_EQ(seeded.dataset.synthetic->seed, 12u);
}

TEST(Config, InvalidValuesRejected) {
  EXPECT_EQ(code_of([] { config_from_json({{"acc", {{"k", 0.5}}}}); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([] { config_from_json({{"method", "magic"}}); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([] { config_from_json({{"acc", {{"alpha_reduction", "max"}}}}); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([] { config_from_json({{"contrastive", {{"temperature", 0.0}}}}); }),
            ErrorCode::kInvalidArgument);

  TempDir dir("cfg");
  std::ofstream(dir.file("bad.json")) << "{ not json";
  EXPECT_EQ(code_of([&] { load_config(dir.file("bad.json")); }), ErrorCode::kInvalidArgument);
  std::ofstream(dir.file("typed.json")) << R"({"optimizer": {"epochs": "many"}})";
  EXPECT_EQ(code_of([&] { load_config(dir.file("typed.json")); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([&] { load_config(dir.file("absent.json")); }), ErrorCode::kIo);
}
