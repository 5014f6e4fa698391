#pragma once

// Query/key encoder networks, linear classification head, layer-level
// backpropagation, SGD with momentum, cosine annealing and the momentum
// (EMA) key update.
//
// Network layout (both query and key side):
//   pooled     = global average pool over H x W          (C)
//   hidden     = relu(w1 * pooled + b1)                  (hidden)
//   embedding  = relu(w2 * hidden + b2)                  (d)
//   projection = normalize(wp * embedding + bp)          (p)
// The classifier consumes the raw embedding: logits = classifier^T * embedding.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fscl/binary_io.hpp"
#include "fscl/error.hpp"
#include "fscl/feature_store.hpp"
#include "fscl/random.hpp"

namespace fscl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct EncoderConfig {
  std::uint32_t input_channels = 16;
  std::uint32_t hidden_dim = 128;
  std::uint32_t embedding_dim = 64;
  std::uint32_t projection_dim = 32;
  std::uint32_t num_classes = 8;
  std::uint64_t init_seed = 0;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"hidden_dim", c.hidden_dim},
                     {"embedding_dim", c.embedding_dim},
                     {"projection_dim", c.projection_dim}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.embedding_dim = j.value("embedding_dim", d.embedding_dim);
  c.projection_dim = j.value("projection_dim", d.projection_dim);
}

/// One encoder (phi) plus its projection head (h). Biases are column matrices.
struct Network {
  Matrix w1, b1, w2, b2, wp, bp;
};

template <typename Net, typename F>
void for_each_tensor(Net& net, F&& f)
  requires std::is_same_v<std::remove_const_t<Net>, Network>
{
  f("w1", net.w1);
  f("b1", net.b1);
  f("w2", net.w2);
  f("b2", net.b2);
  f("wp", net.wp);
  f("bp", net.bp);
}

struct EncoderParams {
  Network query;
  Network key;
  Matrix classifier;  // d x num_classes

  std::uint32_t embedding_dim() const { return static_cast<std::uint32_t>(query.w2.rows()); }
  std::uint32_t num_classes() const { return static_cast<std::uint32_t>(classifier.cols()); }
  std::uint32_t input_channels() const { return static_cast<std::uint32_t>(query.w1.cols()); }
};

/// Visits every tensor with a qualified name ("query.w1", ..., "classifier").
template <typename Params, typename F>
void for_each_tensor(Params& params, F&& f)
  requires std::is_same_v<std::remove_const_t<Params>, EncoderParams>
{
  for_each_tensor(params.query, [&](const char* n, auto& t) { f(std::string("query.") + n, t); });
  for_each_tensor(params.key, [&](const char* n, auto& t) { f(std::string("key.") + n, t); });
  f(std::string("classifier"), params.classifier);
}

inline EncoderParams zeros_like(const EncoderParams& p) {
  EncoderParams z = p;
  for_each_tensor(z, [](const std::string&, Matrix& t) { t.setZero(); });
  return z;
}

/// Seeded uniform fan-in init, zero biases; key starts as a copy of query.
inline EncoderParams init_encoder(const EncoderConfig& cfg) {
  require(cfg.input_channels >= 1 && cfg.hidden_dim >= 1 && cfg.embedding_dim >= 1 &&
              cfg.projection_dim >= 1 && cfg.num_classes >= 1,
          ErrorCode::kInvalidArgument, "encoder dimensions must be positive");
  Rng rng(mix_seed(cfg.init_seed, 0xE4C0DE));
  auto uniform_matrix = [&rng](Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
    return m;
  };
  EncoderParams p;
  p.query.w1 = uniform_matrix(cfg.hidden_dim, cfg.input_channels, cfg.input_channels);
  p.query.b1 = Matrix::Zero(cfg.hidden_dim, 1);
  p.query.w2 = uniform_matrix(cfg.embedding_dim, cfg.hidden_dim, cfg.hidden_dim);
  p.query.b2 = Matrix::Zero(cfg.embedding_dim, 1);
  p.query.wp = uniform_matrix(cfg.projection_dim, cfg.embedding_dim, cfg.embedding_dim);
  p.query.bp = Matrix::Zero(cfg.projection_dim, 1);
  p.key = p.query;
  p.classifier = uniform_matrix(cfg.embedding_dim, cfg.num_classes, cfg.embedding_dim);
  return p;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline Vector global_average_pool(const FeatureMap& fm) {
  const auto& s = fm.shape;
  Vector out(s.channels);
  const std::size_t plane = s.plane();
  for (std::uint32_t c = 0; c < s.channels; ++c) {
    double sum = 0.0;
    const float* p = fm.data.data() + c * plane;
    for (std::size_t k = 0; k < plane; ++k) sum += p[k];
    out(c) = plane == 0 ? 0.0 : sum / static_cast<double>(plane);
  }
  return out;
}

/// Intermediate activations kept for backpropagation.
struct ForwardCache {
  Vector pooled;
  Vector hidden_pre, hidden;
  Vector embedding_pre, embedding;
  Vector projection_pre;  // before normalization
  Vector projection;      // unit norm
  double projection_norm = 0.0;
};

inline Vector relu(const Vector& v) { return v.cwiseMax(0.0); }

inline Vector encode_pooled(const Network& net, const Vector& pooled, ForwardCache* cache = nullptr) {
  Vector hidden_pre = net.w1 * pooled + net.b1.col(0);
  Vector hidden = relu(hidden_pre);
  Vector embedding_pre = net.w2 * hidden + net.b2.col(0);
  Vector embedding = relu(embedding_pre);
  if (cache) {
    cache->pooled = pooled;
    cache->hidden_pre = std::move(hidden_pre);
    cache->hidden = std::move(hidden);
    cache->embedding_pre = std::move(embedding_pre);
    cache->embedding = embedding;
  }
  return embedding;
}

inline void check_input(const Network& net, const FeatureMap& fm) {
  require(fm.shape.channels == net.w1.cols() && fm.data.size() == fm.shape.size(), ErrorCode::kShapeMismatch,
          "encoder expects " + std::to_string(net.w1.cols()) + " channels, got feature map " +
              to_string(fm.shape));
}

/// Query-network embedding phi_q(x).
inline Vector embed(const EncoderParams& params, const FeatureMap& fm) {
  check_input(params.query, fm);
  return encode_pooled(params.query, global_average_pool(fm));
}

enum class Branch { kQuery, kKey };

/// Projection head followed by L2 normalization. A zero pre-normalization
/// vector is an error, not a silent division.
inline Vector project(const EncoderParams& params, Branch which, const Vector& embedding,
                      Vector* pre = nullptr, double* norm_out = nullptr) {
  const Network& net = which == Branch::kQuery ? params.query : params.key;
  require(embedding.size() == net.wp.cols(), ErrorCode::kShapeMismatch, "embedding dimension mismatch");
  Vector z = net.wp * embedding + net.bp.col(0);
  const double norm = z.norm();
  require(norm > 0.0 && std::isfinite(norm), ErrorCode::kZeroNorm,
          "projection head produced a zero or non-finite vector");
  if (pre) *pre = z;
  if (norm_out) *norm_out = norm;
  return z / norm;
}

/// Full pass; the projection head is skipped when `with_projection` is false.
inline ForwardCache forward(const EncoderParams& params, Branch which, const FeatureMap& fm,
                            bool with_projection = true) {
  const Network& net = which == Branch::kQuery ? params.query : params.key;
  check_input(net, fm);
  ForwardCache cache;
  encode_pooled(net, global_average_pool(fm), &cache);
  if (with_projection) {
    cache.projection = project(params, which, cache.embedding, &cache.projection_pre, &cache.projection_norm);
  }
  return cache;
}

inline Vector classify_logits(const EncoderParams& params, const Vector& embedding) {
  require(embedding.size() == params.classifier.rows(), ErrorCode::kShapeMismatch,
          "embedding dimension mismatch for classifier");
  return params.classifier.transpose() * embedding;
}

// ---------------------------------------------------------------------------
// Backward through one query-network pass
// ---------------------------------------------------------------------------

/// Accumulates into `grad` the gradients of a loss whose partial derivatives
/// w.r.t. the embedding (direct path, e.g. the classifier) and the
/// normalized projection are given.
inline void backprop_network(const Network& net, const ForwardCache& cache, const Vector& d_embedding_direct,
                             const Vector* d_projection, Network& grad) {
  Vector d_embedding = d_embedding_direct;
  if (d_projection) {
    // q = z / |z|  =>  dz = (I - q q^T) dq / |z|
    const Vector& q = cache.projection;
    Vector d_z = (*d_projection - q * q.dot(*d_projection)) / cache.projection_norm;
    grad.wp.noalias() += d_z * cache.embedding.transpose();
    grad.bp.col(0) += d_z;
    d_embedding.noalias() += net.wp.transpose() * d_z;
  }
  Vector d_embedding_pre = d_embedding.cwiseProduct((cache.embedding_pre.array() > 0.0).cast<double>().matrix());
  grad.w2.noalias() += d_embedding_pre * cache.hidden.transpose();
  grad.b2.col(0) += d_embedding_pre;
  Vector d_hidden = net.w2.transpose() * d_embedding_pre;
  Vector d_hidden_pre = d_hidden.cwiseProduct((cache.hidden_pre.array() > 0.0).cast<double>().matrix());
  grad.w1.noalias() += d_hidden_pre * cache.pooled.transpose();
  grad.b1.col(0) += d_hidden_pre;
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

inline double cosine_lr(std::uint32_t epoch, std::uint32_t total, double base_lr) {
  require(total >= 1 && epoch <= total, ErrorCode::kInvalidArgument, "cosine_lr needs 0 <= epoch <= total, total >= 1");
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / total));
}

struct OptimizerState {
  EncoderParams velocity;  // only query and classifier entries are used
  double momentum = 0.9;
  double learning_rate = 0.1;
};

inline OptimizerState make_optimizer(const EncoderParams& params, double momentum, double learning_rate) {
  return OptimizerState{zeros_like(params), momentum, learning_rate};
}

/// Classic momentum: v <- momentum * v + g; theta <- theta - lr * v.
/// Only the query network and classifier are trained; the key side is
/// updated exclusively by momentum_update.
inline void sgd_step(EncoderParams& params, const EncoderParams& grads, OptimizerState& state) {
  auto step = [&](Matrix& theta, const Matrix& g, Matrix& v) {
    require(theta.rows() == g.rows() && theta.cols() == g.cols(), ErrorCode::kShapeMismatch,
            "gradient shape mismatch");
    v = state.momentum * v + g;
    theta -= state.learning_rate * v;
  };
  step(params.query.w1, grads.query.w1, state.velocity.query.w1);
  step(params.query.b1, grads.query.b1, state.velocity.query.b1);
  step(params.query.w2, grads.query.w2, state.velocity.query.w2);
  step(params.query.b2, grads.query.b2, state.velocity.query.b2);
  step(params.query.wp, grads.query.wp, state.velocity.query.wp);
  step(params.query.bp, grads.query.bp, state.velocity.query.bp);
  step(params.classifier, grads.classifier, state.velocity.classifier);
}

/// key <- m * key + (1 - m) * query, elementwise.
inline void momentum_update(EncoderParams& params, double m) {
  require(m >= 0.0 && m <= 1.0, ErrorCode::kInvalidArgument, "momentum must be in [0, 1]");
  auto ema = [m](Matrix& key, const Matrix& query) { key = m * key + (1.0 - m) * query; };
  ema(params.key.w1, params.query.w1);
  ema(params.key.b1, params.query.b1);
  ema(params.key.w2, params.query.w2);
  ema(params.key.b2, params.query.b2);
  ema(params.key.wp, params.query.wp);
  ema(params.key.bp, params.query.bp);
}

/// Appends `extra` freshly initialized classifier columns.
inline void grow_classifier(EncoderParams& params, std::uint32_t extra, std::uint64_t seed) {
  const Eigen::Index d = params.classifier.rows();
  const Eigen::Index old = params.classifier.cols();
  Rng rng(mix_seed(seed, 0xC1A55));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  params.classifier.conservativeResize(d, old + extra);
  for (Eigen::Index c = old; c < old + extra; ++c)
    for (Eigen::Index r = 0; r < d; ++r) params.classifier(r, c) = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------------------
// Checkpoint ("FSCM" container)
// ---------------------------------------------------------------------------

inline std::vector<io::NamedTensor> encoder_tensors(const EncoderParams& params) {
  std::vector<io::NamedTensor> out;
  for_each_tensor(params, [&](const std::string& name, const Matrix& t) { out.push_back({"encoder." + name, t}); });
  return out;
}

inline EncoderParams encoder_from_tensors(const std::vector<io::NamedTensor>& tensors) {
  EncoderParams p;
  std::size_t found = 0;
  for_each_tensor(p, [&](const std::string& name, Matrix& t) {
    for (const auto& nt : tensors) {
      if (nt.name == "encoder." + name) {
        t = nt.value;
        ++found;
        return;
      }
    }
    fail(ErrorCode::kInvalidValue, "checkpoint is missing tensor encoder." + name);
  });
  const auto h = p.query.w1.rows(), c = p.query.w1.cols(), d = p.query.w2.rows(), pd = p.query.wp.rows();
  auto shaped = [](const Matrix& m, Eigen::Index r, Eigen::Index cc) { return m.rows() == r && m.cols() == cc; };
  for (const Network* net : {&p.query, &p.key}) {
    require(shaped(net->w1, h, c) && shaped(net->b1, h, 1) && shaped(net->w2, d, h) && shaped(net->b2, d, 1) &&
                shaped(net->wp, pd, d) && shaped(net->bp, pd, 1),
            ErrorCode::kShapeMismatch, "inconsistent encoder tensor shapes in checkpoint");
  }
  require(p.classifier.rows() == d, ErrorCode::kShapeMismatch, "classifier rows must equal embedding dim");
  return p;
}

inline void save_encoder(const EncoderParams& params, const std::string& path) {
  io::write_container(path, encoder_tensors(params));
}

inline EncoderParams load_encoder(const std::string& path) {
  return encoder_from_tensors(io::read_container(path));
}

}  // namespace fscl
