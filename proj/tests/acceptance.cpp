// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "fscl/fscl.hpp"
#include "gradient_check.hpp"
#include "linear_oracle.hpp"

using namespace fscl;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit_s > 0.0 && secs >= limit_s) {
    o.pass = false;
    o.detail += " (over the " + std::to_string(static_cast<int>(limit_s)) + " s budget)";
  }
  if (!o.pass) ++failures;
  std::printf("%s criterion %d  %-28s %8.2f s  %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), secs,
              o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

Outcome closed_form_loss() {
  KeyQueue one(1);
  one.push(vec2(0, 1), 1);
  const double got = scl_loss(vec2(1, 0), vec2(1, 0), 0, one, 1.0);
  const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  double worst = std::abs(got - want);

  // Query orthogonal to its own key and every queued key: all logits zero.
  for (std::size_t m : {1u, 4u, 31u}) {
    KeyQueue q(m);
    for (std::size_t i = 0; i < m; ++i) q.push(Vector::Unit(3, 1 + i % 2), static_cast<std::uint32_t>(i % 3));
    for (double tau : {0.07, 1.0}) {
      const double uniform = scl_loss(Vector::Unit(3, 0), Vector::Unit(3, 2), 0, q, tau);
      worst = std::max(worst, std::abs(uniform - std::log(static_cast<double>(m + 1))));
    }
  }
  return {worst <= 1e-9, fmt("fixture %.9f vs %.9f, max err %.2e", got, want, worst)};
}

Outcome gradients() {
  double worst = 0.0, key = 0.0;
  std::size_t coords = 0;
  std::string where;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto f = testing::make_gradient_fixture(seed);
    const auto r = testing::check_gradients(f.params, f.batch, f.queue, LossOptions{0.07, false});
    coords += r.coordinates;
    key = std::max(key, r.max_key_gradient);
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      where = r.worst_tensor;
    }
  }
  return {worst <= 1e-3 && key == 0.0,
          fmt("6 batches, %.0f coordinates, max rel err %.2e", static_cast<double>(coords), worst) + " in " + where};
}

Outcome acc_algebra() {
  Matrix cov(2, 2);
  cov << 2, 1, 1, 2;
  Matrix want(2, 2);
  want << 1, 0.5, 0.5, 1;
  const double shrink_err = (shrink_normalize(cov, 1.0) - want).cwiseAbs().maxCoeff();

  Rng rng(42);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.index(8));
    Matrix a(d, d);
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.normal();
    const Matrix spd = a * a.transpose() + 0.5 * Matrix::Identity(d, d);
    Vector mean(d), g(d);
    for (Eigen::Index i = 0; i < d; ++i) {
      mean(i) = rng.normal();
      g(i) = rng.normal() * 3.0;
    }
    const double fast = mahalanobis(g, testing::model_from(0, mean, spd));
    const double slow = testing::brute_force_mahalanobis(g, mean, spd);
    worst = std::max(worst, std::abs(fast - slow) / std::max(1.0, slow));
  }
  return {shrink_err <= 1e-12 && worst <= 1e-8,
          fmt("shrink err %.2e, 100 SPD cases max err %.2e", shrink_err, worst)};
}

Outcome rank_deficiency() {
  // ReLU-like 5-shot classes: non-negative, some units dead, correlated noise.
  Rng rng(7);
  const GaussianizeConfig box_cox{0.2, 1e-6};
  int failed = 0;
  std::string first;
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Index d = 64;
    Vector centre(d);
    for (Eigen::Index i = 0; i < d; ++i) centre(i) = rng.uniform(0.0, 3.0);
    const double scale = rng.uniform(0.1, 2.0);
    const double rho = rng.uniform(0.0, 0.9);
    std::vector<Vector> shots;
    for (int n = 0; n < 5; ++n) {
      const double shared = rng.normal();
      Vector x(d);
      for (Eigen::Index i = 0; i < d; ++i) {
        const double noise = std::sqrt(rho) * shared + std::sqrt(1.0 - rho) * rng.normal();
        x(i) = std::max(0.0, centre(i) + scale * noise);
      }
      shots.push_back(x);
    }
    try {
      fit_class(shots, box_cox, 4.0);
    } catch (const Error& e) {
      if (failed++ == 0) first = e.what();
    }
  }
  return {failed == 0, fmt("%.0f / 1000 trials failed", failed) + (first.empty() ? "" : ": " + first)};
}

Outcome box_cox() {
  const double exact = gaussianize(Vector::Constant(1, 32.0), {0.2, 1e-6})(0);
  double worst = 0.0;
  for (double x : {0.5, 1.0, 2.0, std::exp(1.0)}) {
    worst = std::max(worst, std::abs(gaussianize(Vector::Constant(1, x), {1e-8, 1e-6})(0) - std::log(x)));
  }
  return {exact == 5.0 && worst <= 1e-6, fmt("32 -> %.17g, log-limit max err %.2e", exact, worst)};
}

// Shared between criteria 6 and 7.
struct Benchmark {
  ExperimentConfig config = ExperimentConfig::desk_default();
  SessionSplits splits;
  std::optional<AblationResult> ablation;
};

Benchmark& benchmark() {
  static Benchmark b = [] {
    Benchmark out;
    out.splits = prepare_splits(out.config, load_data(out.config));
    return out;
  }();
  return b;
}

const SessionReport& variant(const AblationResult& r, const std::string& name) {
  for (const auto& [n, report] : r.variants) {
    if (n == name) return report;
  }
  fail(ErrorCode::kInvalidArgument, "no ablation variant " + name);
}

Outcome protocol_ordering() {
  Benchmark& b = benchmark();
  b.ablation = run_ablation(b.config, b.splits);
  ExperimentConfig ft = b.config;
  ft.method = Method::kFinetune;
  const SessionReport finetune = run_experiment(ft, b.splits).report;

  const double ours = variant(*b.ablation, "ours").sessions.back().top1.accuracy;
  const double wo_acc = variant(*b.ablation, "ours_wo_acc").sessions.back().top1.accuracy;
  const double ft_last = finetune.sessions.back().top1.accuracy;
  const double ft_old = finetune.sessions.back().old_class_top1.value_or(1.0);
  const double ft_first = finetune.sessions.front().top1.accuracy;
  const bool ok = ours >= wo_acc && wo_acc >= ft_last && ft_old < 0.3 * ft_first;
  return {ok, fmt("ours %.4f, w/o ACC %.4f, finetune %.4f", ours, wo_acc, ft_last) +
                  fmt("; finetune old-class %.4f vs session 0 %.4f", ft_old, ft_first)};
}

Outcome ablation_mechanics() {
  Benchmark& b = benchmark();
  if (!b.ablation) b.ablation = run_ablation(b.config, b.splits);
  const AblationResult again = run_ablation(b.config, b.splits);
  std::set<std::string> bodies;
  for (const auto& [name, report] : b.ablation->variants) bodies.insert(report_to_json(report).dump());
  const bool reproducible = ablation_to_json(*b.ablation).dump() == ablation_to_json(again).dump();
  const bool ok = b.ablation->variants.size() == 4 && bodies.size() == 4 && reproducible &&
                  b.ablation->sigma_a_max_difference > 1e-6;
  return {ok, fmt("%.0f distinct reports, reproducible %s", static_cast<double>(bodies.size())) +
                  (reproducible ? "yes" : "no") +
                  fmt(", max Sigma_a difference %.4g", b.ablation->sigma_a_max_difference)};
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome cli_determinism() {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "fscl_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);

  ExperimentConfig c = ExperimentConfig::desk_default();
  c.dataset.synthetic->per_class = 60;
  c.dataset.synthetic_test_per_class = 20;
  c.optimizer.epochs = 5;
  c.set_seed(11);
  const fs::path config = root / "config.json";
  std::ofstream(config) << nlohmann::json(c).dump(2);

  std::vector<std::string> reports;
  for (const char* run : {"a", "b"}) {
    const fs::path out = root / run;
    for (const char* sub : {"run-sessions", "ablate"}) {
      const std::string cmd = std::string(FSCL_CLI_PATH) + " --config " + config.string() + " --out-dir " +
                              out.string() + " " + sub + " > " + (root / "log.txt").string() + " 2>&1";
      if (std::system(cmd.c_str()) != 0) return {false, std::string(sub) + " exited non-zero"};
    }
    reports.push_back(read_file(out / "report.json") + read_file(out / "ablation.json"));
  }
  fs::remove_all(root);
  const bool same = !reports[0].empty() && reports[0] == reports[1];
  return {same, same ? "report.json and ablation.json byte-identical across two runs" : "reports differ"};
}

}  // namespace

int main() {
  criterion(1, "closed-form loss", 1.0, closed_form_loss);
  criterion(2, "gradient correctness", 30.0, gradients);
  criterion(3, "ACC algebra", 5.0, acc_algebra);
  criterion(4, "rank-deficient 5-shot fits", 30.0, rank_deficiency);
  criterion(5, "Box-Cox contract", 1.0, box_cox);
  criterion(6, "protocol ordering", 300.0, protocol_ordering);
  criterion(7, "ablation mechanics", 0.0, ablation_mechanics);
  criterion(8, "CLI determinism", 0.0, cli_determinism);
  std::printf("%s: %d of 8 criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? 0 : 1;
}
