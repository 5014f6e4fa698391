#pragma once

// Supervised contrastive loss over a labeled key queue, softmax cross-entropy,
// their equally weighted sum, and its analytic gradient w.r.t. the query side.

#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fscl/encoder.hpp"
#include "fscl/error.hpp"
#include "fscl/feature_store.hpp"

namespace fscl {

inline constexpr double kUnitNormTolerance = 1e-6;

inline bool is_unit(const Vector& v) { return std::abs(v.norm() - 1.0) <= kUnitNormTolerance; }

/// Fixed-capacity FIFO of (unit-norm key, label); oldest entries leave first.
class KeyQueue {
 public:
  struct Entry {
    Vector key;
    std::uint32_t label = 0;
  };

  explicit KeyQueue(std::size_t capacity = 1024) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::deque<Entry>& entries() const { return entries_; }

  void push(const Vector& key, std::uint32_t label) {
    require(is_unit(key), ErrorCode::kInvalidValue, "queued keys must be unit norm");
    if (capacity_ == 0) return;
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back({key, label});
  }

 private:
  std::size_t capacity_;
  std::deque<Entry> entries_;
};

/// Appends keys in order, evicting the oldest so size stays <= capacity.
inline void queue_push(KeyQueue& queue, const std::vector<Vector>& keys, const std::vector<std::uint32_t>& labels) {
  require(keys.size() == labels.size(), ErrorCode::kInvalidArgument, "keys and labels differ in length");
  for (std::size_t i = 0; i < keys.size(); ++i) queue.push(keys[i], labels[i]);
}

namespace detail {

struct SclTerms {
  double loss = 0.0;
  Vector d_query;  // dL/dq
};

// Denominator runs over the sample's own key followed by the whole queue.
inline SclTerms scl_terms(const Vector& q, const Vector& k, std::uint32_t label, const KeyQueue& queue,
                          double temperature, bool want_gradient) {
  require(temperature > 0.0, ErrorCode::kInvalidArgument, "temperature must be positive");
  require(is_unit(q) && is_unit(k), ErrorCode::kInvalidValue, "query and key must be unit norm");
  const std::size_t m = queue.size() + 1;
  Vector logits(m);
  logits(0) = q.dot(k) / temperature;
  std::size_t i = 1;
  for (const auto& e : queue.entries()) {
    require(e.key.size() == q.size(), ErrorCode::kShapeMismatch, "queue key dimension mismatch");
    logits(i++) = q.dot(e.key) / temperature;
  }
  const double max_logit = logits.maxCoeff();
  Vector weights = (logits.array() - max_logit).exp();
  const double partition = weights.sum();
  const double log_partition = max_logit + std::log(partition);

  double positive_sum = logits(0);
  std::size_t positives = 1;
  i = 1;
  for (const auto& e : queue.entries()) {
    if (e.label == label) {
      positive_sum += logits(i);
      ++positives;
    }
    ++i;
  }
  SclTerms out;
  out.loss = log_partition - positive_sum / static_cast<double>(positives);
  if (want_gradient) {
    // dL/dq = (sum_j softmax_j k_j - mean_{p in P} k_p) / tau
    weights /= partition;
    Vector expected = weights(0) * k;
    Vector positive_mean = k;
    i = 1;
    for (const auto& e : queue.entries()) {
      expected.noalias() += weights(i) * e.key;
      if (e.label == label) positive_mean += e.key;
      ++i;
    }
    positive_mean /= static_cast<double>(positives);
    out.d_query = (expected - positive_mean) / temperature;
  }
  return out;
}

struct CeTerms {
  double loss = 0.0;
  Vector d_logits;
};

inline CeTerms ce_terms(const Vector& logits, std::uint32_t label, bool want_gradient) {
  require(label < logits.size(), ErrorCode::kLabelOutOfRange,
          "label " + std::to_string(label) + " out of range for " + std::to_string(logits.size()) + " logits");
  const double max_logit = logits.maxCoeff();
  Vector weights = (logits.array() - max_logit).exp();
  const double partition = weights.sum();
  CeTerms out;
  out.loss = max_logit + std::log(partition) - logits(label);
  if (want_gradient) {
    out.d_logits = weights / partition;
    out.d_logits(label) -= 1.0;
  }
  return out;
}

}  // namespace detail

/// Supervised contrastive loss of one sample:
///   -(1/|P|) sum_{k+ in P} log( exp(q.k+/tau) / sum_{k' in {k} u Q} exp(q.k'/tau) )
/// where P holds the own key plus every queued key with the same label.
inline double scl_loss(const Vector& q, const Vector& k, std::uint32_t label, const KeyQueue& queue,
                       double temperature) {
  return detail::scl_terms(q, k, label, queue, temperature, false).loss;
}

inline double ce_loss(const Vector& logits, std::uint32_t label) {
  return detail::ce_terms(logits, label, false).loss;
}

struct LossOptions {
  double temperature = 0.07;
  bool disable_scl = false;
};

/// One training example: two augmented views of the same input. `label` is
/// the classifier column index (0 .. num_classes-1).
struct TrainingExample {
  FeatureMap query_view;
  FeatureMap key_view;
  std::uint32_t label = 0;
};

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double scl = 0.0;
};

struct StepResult {
  LossBreakdown loss;
  EncoderParams gradients;   // key-side entries stay zero
  std::vector<Vector> keys;  // projected keys of the batch, ready for queue_push
};

namespace detail {

inline StepResult evaluate_batch(const EncoderParams& params, const std::vector<TrainingExample>& batch,
                                 const KeyQueue& queue, const LossOptions& options, bool want_gradient) {
  require(!batch.empty(), ErrorCode::kEmpty, "batch must be non-empty");
  StepResult out;
  if (want_gradient) out.gradients = zeros_like(params);
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    ForwardCache qc = forward(params, Branch::kQuery, ex.query_view, !options.disable_scl);
    const Vector logits = classify_logits(params, qc.embedding);
    const CeTerms ce = ce_terms(logits, ex.label, want_gradient);
    out.loss.ce += scale * ce.loss;

    Vector d_projection;
    if (!options.disable_scl) {
      ForwardCache kc = forward(params, Branch::kKey, ex.key_view);
      const SclTerms scl = scl_terms(qc.projection, kc.projection, ex.label, queue, options.temperature,
                                     want_gradient);
      out.loss.scl += scale * scl.loss;
      out.keys.push_back(kc.projection);
      if (want_gradient) d_projection = scale * scl.d_query;
    }
    if (want_gradient) {
      const Vector d_logits = scale * ce.d_logits;
      out.gradients.classifier.noalias() += qc.embedding * d_logits.transpose();
      const Vector d_embedding = params.classifier * d_logits;
      backprop_network(params.query, qc, d_embedding, options.disable_scl ? nullptr : &d_projection,
                       out.gradients.query);
    }
  }
  out.loss.total = out.loss.ce + out.loss.scl;
  return out;
}

}  // namespace detail

/// Mean over the batch of ce_loss + scl_loss with equal weights.
inline LossBreakdown total_loss(const EncoderParams& params, const std::vector<TrainingExample>& batch,
                                const KeyQueue& queue, const LossOptions& options) {
  return detail::evaluate_batch(params, batch, queue, options, false).loss;
}

/// Exact gradient of total_loss w.r.t. every query-side tensor and the
/// classifier. Keys (and the queue) are treated as constants.
inline StepResult backward(const EncoderParams& params, const std::vector<TrainingExample>& batch,
                           const KeyQueue& queue, const LossOptions& options) {
  StepResult result = detail::evaluate_batch(params, batch, queue, options, true);
  for_each_tensor(result.gradients, [](const std::string& name, const Matrix& g) {
    if (!g.allFinite()) fail(ErrorCode::kNonFinite, "non-finite gradient in " + name);
  });
  return result;
}

}  // namespace fscl
