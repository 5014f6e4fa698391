#pragma once

// Adaptive covariance classifier: Box-Cox Gaussianization, per-class mean and
// covariance, adaptive diagonal shrinkage, correlation normalization and a
// Mahalanobis argmin decision. Also the nearest-class-mean baseline.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fscl/binary_io.hpp"
#include "fscl/encoder.hpp"
#include "fscl/error.hpp"

namespace fscl {

struct GaussianizeConfig {
  double lambda = 0.2;
  double epsilon = 1e-6;  // zero clamp applied before the transform
};

/// Elementwise Box-Cox: (x^lambda - 1) / lambda, or log(x) when lambda == 0.
inline Vector gaussianize(const Vector& x, const GaussianizeConfig& cfg) {
  require(cfg.epsilon > 0.0, ErrorCode::kInvalidArgument, "epsilon must be positive");
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = std::max(x(i), cfg.epsilon);
    out(i) = cfg.lambda == 0.0 ? std::log(v) : (std::pow(v, cfg.lambda) - 1.0) / cfg.lambda;
  }
  return out;
}

/// How the per-sample squared-deviation vectors collapse to one scalar.
enum class AlphaReduction {
  kMeanOverDims,  // k * mean over samples of mean over dims
  kSumOverDims,   // k * mean over samples of squared norm
};

/// The one place that turns per-sample squared deviations into the scalar
/// alpha. Columns of `centered` are samples.
inline double adaptive_alpha(const Matrix& centered, double k,
                             AlphaReduction reduction = AlphaReduction::kSumOverDims) {
  if (centered.size() == 0) return 0.0;
  const double mean_sq = centered.array().square().mean();
  return reduction == AlphaReduction::kSumOverDims ? k * mean_sq * static_cast<double>(centered.rows())
                                                   : k * mean_sq;
}

/// S = cov + alpha * s1 * I + s2 * (1 - I), then S[i,j] / sqrt(S[i,i] S[j,j]).
/// s1 and s2 are the means of the diagonal and off-diagonal entries of cov.
inline Matrix shrink_normalize(const Matrix& cov, double alpha) {
  require(cov.rows() == cov.cols() && cov.rows() >= 1, ErrorCode::kShapeMismatch, "covariance must be square");
  const Eigen::Index d = cov.rows();
  const double diag_mean = cov.diagonal().mean();
  const double off_diag_mean = d >= 2 ? (cov.sum() - cov.trace()) / static_cast<double>(d * (d - 1)) : 0.0;

  Matrix shrunk = cov;
  shrunk.array() += off_diag_mean;
  shrunk.diagonal().array() += alpha * diag_mean - off_diag_mean;

  const Vector diag = shrunk.diagonal();
  for (Eigen::Index i = 0; i < d; ++i) {
    require(diag(i) > 0.0 && std::isfinite(diag(i)), ErrorCode::kDegenerateClass,
            "shrunk covariance has a non-positive diagonal entry at " + std::to_string(i));
  }
  const Vector inv_sqrt = diag.cwiseSqrt().cwiseInverse();
  Matrix out = inv_sqrt.asDiagonal() * shrunk * inv_sqrt.asDiagonal();
  out.diagonal().setOnes();
  return out;
}

struct ClassModel {
  std::uint32_t class_id = 0;
  Vector mean;        // of Gaussianized embeddings
  Matrix covariance;  // population (1/n) covariance; empty when loaded from a checkpoint
  double alpha = 0.0;
  Matrix adapted;     // shrunk, normalized covariance
  Eigen::LLT<Matrix> factor;
  std::uint64_t count = 0;

  Eigen::Index dim() const { return mean.size(); }
};

inline Eigen::LLT<Matrix> factorize(const Matrix& adapted, std::uint32_t class_id) {
  Eigen::LLT<Matrix> llt(adapted);
  if (llt.info() != Eigen::Success) {
    fail(ErrorCode::kFactorization,
         "adapted covariance of class " + std::to_string(class_id) + " is not positive definite");
  }
  return llt;
}

/// Fits one class from raw (pre-Gaussianization) embeddings. `fixed_alpha`
/// replaces the adaptive value when set.
inline ClassModel fit_class(const std::vector<Vector>& embeddings, const GaussianizeConfig& cfg, double k,
                            std::optional<double> fixed_alpha = std::nullopt, std::uint32_t class_id = 0,
                            AlphaReduction reduction = AlphaReduction::kSumOverDims) {
  require(!embeddings.empty(), ErrorCode::kEmpty, "class " + std::to_string(class_id) + " has no samples");
  require(k > 0.0, ErrorCode::kInvalidArgument, "scaling factor k must be positive");
  const Eigen::Index d = embeddings.front().size();
  const auto n = static_cast<Eigen::Index>(embeddings.size());
  Matrix g(d, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    require(embeddings[i].size() == d, ErrorCode::kShapeMismatch, "embedding dimensions differ within class");
    g.col(i) = gaussianize(embeddings[i], cfg);
  }

  ClassModel model;
  model.class_id = class_id;
  model.count = static_cast<std::uint64_t>(n);
  model.mean = g.rowwise().mean();
  const Matrix centered = g.colwise() - model.mean;
  model.covariance = centered * centered.transpose() / static_cast<double>(n);
  // Identical samples leave only rounding noise from the mean in `centered`.
  const double spread = centered.cwiseAbs().maxCoeff();
  if (n < 2 || spread <= 1e-12 * (1.0 + model.mean.cwiseAbs().maxCoeff())) {
    fail(ErrorCode::kDegenerateClass,
         "class " + std::to_string(class_id) + " has zero covariance (" + std::to_string(n) + " samples)");
  }
  model.alpha = fixed_alpha.value_or(adaptive_alpha(centered, k, reduction));
  require(model.alpha >= 0.0, ErrorCode::kInvalidArgument, "alpha must be non-negative");
  model.adapted = shrink_normalize(model.covariance, model.alpha);
  try {
    model.factor = factorize(model.adapted, class_id);
  } catch (const Error& e) {
    fail(e.code(), std::string(e.what()) + " (alpha " + std::to_string(model.alpha) +
                       "; alpha <= 1 can lose definiteness, raise k or check for collapsed embeddings)");
  }
  return model;
}

/// sqrt((g - mean)^T adapted^{-1} (g - mean)) via the Cholesky factor.
inline double mahalanobis(const Vector& g, const ClassModel& model) {
  require(g.size() == model.dim(), ErrorCode::kShapeMismatch, "dimension mismatch in mahalanobis");
  const Vector whitened = model.factor.matrixL().solve(g - model.mean);
  return whitened.norm();
}

struct Prediction {
  std::uint32_t label = 0;
  std::vector<std::pair<std::uint32_t, double>> distances;  // ascending class id
};

/// Ties go to the smallest class id (strict less-than over ascending ids).
inline Prediction argmin_distance(std::vector<std::pair<std::uint32_t, double>> distances) {
  require(!distances.empty(), ErrorCode::kEmpty, "classifier has no classes");
  Prediction p;
  double best = std::numeric_limits<double>::infinity();
  p.label = distances.front().first;
  for (const auto& [id, dist] : distances) {
    if (dist < best) {
      best = dist;
      p.label = id;
    }
  }
  p.distances = std::move(distances);
  return p;
}

class AccClassifier {
 public:
  AccClassifier() = default;
  AccClassifier(GaussianizeConfig cfg, double k, std::optional<double> fixed_alpha = std::nullopt,
                AlphaReduction reduction = AlphaReduction::kSumOverDims)
      : cfg_(cfg), k_(k), fixed_alpha_(fixed_alpha), reduction_(reduction) {
    require(k > 0.0, ErrorCode::kInvalidArgument, "scaling factor k must be positive");
  }

  const GaussianizeConfig& gaussianize_config() const { return cfg_; }
  double k() const { return k_; }
  std::optional<double> fixed_alpha() const { return fixed_alpha_; }
  AlphaReduction alpha_reduction() const { return reduction_; }
  const std::map<std::uint32_t, ClassModel>& models() const { return models_; }
  bool empty() const { return models_.empty(); }

  void add_class(std::uint32_t class_id, const std::vector<Vector>& embeddings) {
    ClassModel model = fit_class(embeddings, cfg_, k_, fixed_alpha_, class_id, reduction_);
    insert(std::move(model));
  }

  void insert(ClassModel model) {
    if (!models_.empty()) {
      require(model.dim() == models_.begin()->second.dim(), ErrorCode::kShapeMismatch,
              "all classes must share the embedding dimension");
    }
    const auto id = model.class_id;
    models_.insert_or_assign(id, std::move(model));
  }

  /// Classifies a raw embedding (Gaussianized internally).
  Prediction predict(const Vector& embedding) const {
    require(!models_.empty(), ErrorCode::kEmpty, "classifier has no classes");
    const Vector g = gaussianize(embedding, cfg_);
    std::vector<std::pair<std::uint32_t, double>> distances;
    distances.reserve(models_.size());
    for (const auto& [id, model] : models_) distances.emplace_back(id, mahalanobis(g, model));
    return argmin_distance(std::move(distances));
  }

 private:
  GaussianizeConfig cfg_;
  double k_ = 4.0;
  std::optional<double> fixed_alpha_;
  AlphaReduction reduction_ = AlphaReduction::kSumOverDims;
  std::map<std::uint32_t, ClassModel> models_;
};

inline Prediction predict(const FeatureMap& x, const EncoderParams& encoder, const AccClassifier& classifier) {
  return classifier.predict(embed(encoder, x));
}

// ---------------------------------------------------------------------------
// Nearest class mean on raw embeddings
// ---------------------------------------------------------------------------

class NcmClassifier {
 public:
  void add_class(std::uint32_t class_id, const std::vector<Vector>& embeddings) {
    require(!embeddings.empty(), ErrorCode::kEmpty, "class " + std::to_string(class_id) + " has no samples");
    Vector mean = Vector::Zero(embeddings.front().size());
    for (const auto& e : embeddings) {
      require(e.size() == mean.size(), ErrorCode::kShapeMismatch, "embedding dimensions differ within class");
      mean += e;
    }
    means_.insert_or_assign(class_id, mean / static_cast<double>(embeddings.size()));
  }

  const std::map<std::uint32_t, Vector>& means() const { return means_; }

  Prediction predict(const Vector& embedding) const {
    std::vector<std::pair<std::uint32_t, double>> distances;
    for (const auto& [id, mean] : means_) {
      require(mean.size() == embedding.size(), ErrorCode::kShapeMismatch, "dimension mismatch in NCM");
      distances.emplace_back(id, (embedding - mean).norm());
    }
    return argmin_distance(std::move(distances));
  }

 private:
  std::map<std::uint32_t, Vector> means_;
};

inline std::uint32_t ncm_fit_predict(const std::map<std::uint32_t, std::vector<Vector>>& embeddings_per_class,
                                     const Vector& query) {
  NcmClassifier ncm;
  for (const auto& [id, embeddings] : embeddings_per_class) ncm.add_class(id, embeddings);
  return ncm.predict(query).label;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

inline std::vector<io::NamedTensor> classifier_tensors(const AccClassifier& acc) {
  std::vector<io::NamedTensor> out;
  Matrix header(1, 5);
  header << acc.gaussianize_config().lambda, acc.gaussianize_config().epsilon, acc.k(),
      acc.fixed_alpha().value_or(std::numeric_limits<double>::quiet_NaN()),
      acc.alpha_reduction() == AlphaReduction::kSumOverDims ? 1.0 : 0.0;
  out.push_back({"acc.config", header});
  for (const auto& [id, model] : acc.models()) {
    const std::string prefix = "class." + std::to_string(id) + ".";
    out.push_back({prefix + "mean", model.mean});
    out.push_back({prefix + "sigma_a", model.adapted});
    out.push_back({prefix + "alpha", Matrix::Constant(1, 1, model.alpha)});
    out.push_back({prefix + "n", Matrix::Constant(1, 1, static_cast<double>(model.count))});
  }
  return out;
}

inline AccClassifier classifier_from_tensors(const std::vector<io::NamedTensor>& tensors) {
  const io::NamedTensor* header = nullptr;
  std::map<std::uint32_t, std::map<std::string, const Matrix*>> parts;
  for (const auto& t : tensors) {
    if (t.name == "acc.config") {
      header = &t;
    } else if (t.name.rfind("class.", 0) == 0) {
      const auto dot = t.name.find('.', 6);
      require(dot != std::string::npos, ErrorCode::kInvalidValue, "malformed tensor name " + t.name);
      const auto id = static_cast<std::uint32_t>(std::stoul(t.name.substr(6, dot - 6)));
      parts[id][t.name.substr(dot + 1)] = &t.value;
    }
  }
  require(header && header->value.size() == 5, ErrorCode::kInvalidValue, "checkpoint has no acc.config");
  const auto& h = header->value;
  std::optional<double> fixed;
  if (!std::isnan(h(0, 3))) fixed = h(0, 3);
  AccClassifier acc(GaussianizeConfig{h(0, 0), h(0, 1)}, h(0, 2), fixed,
                    h(0, 4) == 1.0 ? AlphaReduction::kSumOverDims : AlphaReduction::kMeanOverDims);
  for (const auto& [id, fields] : parts) {
    for (const char* key : {"mean", "sigma_a", "alpha", "n"}) {
      require(fields.contains(key), ErrorCode::kInvalidValue,
              "class " + std::to_string(id) + " is missing " + key);
    }
    ClassModel m;
    m.class_id = id;
    m.mean = *fields.at("mean");
    m.adapted = *fields.at("sigma_a");
    m.alpha = (*fields.at("alpha"))(0, 0);
    m.count = static_cast<std::uint64_t>((*fields.at("n"))(0, 0));
    require(m.mean.cols() == 1 || m.mean.size() == 0, ErrorCode::kShapeMismatch, "mean must be a column");
    require(m.adapted.rows() == m.mean.size() && m.adapted.cols() == m.mean.size(), ErrorCode::kShapeMismatch,
            "sigma_a shape does not match mean of class " + std::to_string(id));
    m.factor = factorize(m.adapted, id);
    acc.insert(std::move(m));
  }
  return acc;
}

inline void save_classifier(const AccClassifier& acc, const std::string& path) {
  io::write_container(path, classifier_tensors(acc));
}

inline AccClassifier load_classifier(const std::string& path) {
  return classifier_from_tensors(io::read_container(path));
}

}  // namespace fscl
