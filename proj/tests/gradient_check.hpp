#pragma once

// Central finite differences against backward() for every query-side tensor
// and the classifier.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fscl/fscl.hpp"

namespace fscl::testing {

struct GradientCheck {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  std::size_t coordinates = 0;
  double max_key_gradient = 0.0;
};

/// Relative error |a - n| / max(|a|, |n|, floor); the floor keeps exactly-zero
/// gradients (dead units) from dividing by zero.
inline GradientCheck check_gradients(EncoderParams params, const std::vector<TrainingExample>& batch,
                                     const KeyQueue& queue, const LossOptions& options, double step = 1e-4,
                                     double floor = 1e-6) {
  const StepResult analytic = backward(params, batch, queue, options);
  GradientCheck out;
  for_each_tensor(analytic.gradients, [&](const std::string& name, const Matrix& g) {
    if (name.rfind("key.", 0) == 0) out.max_key_gradient = std::max(out.max_key_gradient, g.cwiseAbs().maxCoeff());
  });

  std::vector<std::pair<std::string, const Matrix*>> grads;
  for_each_tensor(analytic.gradients, [&](const std::string& name, const Matrix& g) { grads.emplace_back(name, &g); });
  std::size_t index = 0;
  for_each_tensor(params, [&](const std::string& name, Matrix& theta) {
    const Matrix& g = *grads[index++].second;
    if (name.rfind("key.", 0) == 0) return;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      const double saved = theta.data()[i];
      theta.data()[i] = saved + step;
      const double up = total_loss(params, batch, queue, options).total;
      theta.data()[i] = saved - step;
      const double down = total_loss(params, batch, queue, options).total;
      theta.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = g.data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.coordinates;
      if (rel > out.max_relative_error) {
        out.max_relative_error = rel;
        out.worst_tensor = name + "[" + std::to_string(i) + "]";
      }
    }
  });
  return out;
}

/// Random small network plus a 3-sample batch and a labelled queue that
/// holds positives for some samples.
struct GradientFixture {
  EncoderParams params;
  std::vector<TrainingExample> batch;
  KeyQueue queue{16};
};

inline GradientFixture make_gradient_fixture(std::uint64_t seed) {
  GradientFixture f;
  EncoderConfig cfg;
  cfg.input_channels = 3;
  cfg.hidden_dim = 6;
  cfg.embedding_dim = 5;
  cfg.projection_dim = 4;
  cfg.num_classes = 3;
  cfg.init_seed = seed;
  f.params = init_encoder(cfg);
  Rng rng(mix_seed(seed, 17));
  // Non-zero biases so every branch of the graph carries signal.
  for_each_tensor(f.params.query, [&](const char*, Matrix& t) {
    if (t.cols() == 1) {
      for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = rng.uniform(0.05, 0.3);
    }
  });
  // A key network that has drifted away from the query one.
  f.params.key = f.params.query;
  for_each_tensor(f.params.key, [&](const char*, Matrix& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t(i) += rng.uniform(-0.05, 0.05);
  });
  const TensorShape shape{3, 4, 4};
  for (std::uint32_t n = 0; n < 3; ++n) {
    FeatureMap q(shape), k(shape);
    for (auto& v : q.data) v = static_cast<float>(rng.uniform(0.0, 2.0));
    for (auto& v : k.data) v = static_cast<float>(rng.uniform(0.0, 2.0));
    f.batch.push_back({q, k, n % 3});
  }
  for (std::uint32_t n = 0; n < 7; ++n) {
    Vector key(4);
    for (Eigen::Index i = 0; i < 4; ++i) key(i) = rng.normal();
    f.queue.push(key.normalized(), static_cast<std::uint32_t>(rng.index(3)));
  }
  return f;
}

}  // namespace fscl::testing
