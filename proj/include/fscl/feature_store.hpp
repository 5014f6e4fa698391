#pragma once

// Feature tensors, labeled datasets, the "FSCL" on-disk format, session
// splitting, and a seeded Gaussian-cluster generator used as stand-in data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fscl/binary_io.hpp"
#include "fscl/error.hpp"
#include "fscl/random.hpp"

namespace fscl {

struct TensorShape {
  std::uint32_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

inline std::string to_string(const TensorShape& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

/// C x H x W activations, stored channel-major.
struct FeatureMap {
  TensorShape shape;
  std::vector<float> data;

  FeatureMap() = default;
  explicit FeatureMap(TensorShape s) : shape(s), data(s.size(), 0.0f) {}
  FeatureMap(TensorShape s, std::vector<float> values) : shape(s), data(std::move(values)) {
    require(data.size() == shape.size(), ErrorCode::kShapeMismatch,
            "feature map payload does not match shape " + to_string(shape));
  }

  float& at(std::size_t c, std::size_t i, std::size_t j) {
    return data[(c * shape.height + i) * shape.width + j];
  }
  float at(std::size_t c, std::size_t i, std::size_t j) const {
    return data[(c * shape.height + i) * shape.width + j];
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

/// Finite and non-negative everywhere.
inline bool is_valid_activation(const FeatureMap& fm) {
  return std::all_of(fm.data.begin(), fm.data.end(),
                     [](float v) { return std::isfinite(v) && v >= 0.0f; });
}

struct LabeledSample {
  FeatureMap feature;
  std::uint32_t label = 0;

  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

enum class Split { kTrain, kTest };

struct Dataset {
  std::uint32_t class_count = 0;
  TensorShape shape;
  Split split = Split::kTrain;
  std::vector<LabeledSample> samples;

  /// Throws on any violated invariant.
  void validate() const {
    for (std::size_t n = 0; n < samples.size(); ++n) {
      const auto& s = samples[n];
      require(s.feature.shape == shape && s.feature.data.size() == shape.size(),
              ErrorCode::kShapeMismatch,
              "sample " + std::to_string(n) + " has shape " + to_string(s.feature.shape) +
                  ", dataset declares " + to_string(shape));
      require(s.label < class_count, ErrorCode::kLabelOutOfRange,
              "sample " + std::to_string(n) + " label " + std::to_string(s.label) +
                  " >= class count " + std::to_string(class_count));
      require(is_valid_activation(s.feature), ErrorCode::kInvalidValue,
              "sample " + std::to_string(n) + " has a negative or non-finite entry");
    }
  }

  std::vector<std::size_t> indices_of(std::uint32_t label) const {
    std::vector<std::size_t> out;
    for (std::size_t n = 0; n < samples.size(); ++n) {
      if (samples[n].label == label) out.push_back(n);
    }
    return out;
  }

  /// Samples whose label is in `labels`, original order preserved.
  Dataset subset(const std::set<std::uint32_t>& labels) const {
    Dataset out{class_count, shape, split, {}};
    for (const auto& s : samples) {
      if (labels.contains(s.label)) out.samples.push_back(s);
    }
    return out;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.class_count == b.class_count && a.shape == b.shape && a.samples == b.samples;
  }
};

// ---------------------------------------------------------------------------
// File format
//
//   "FSCL" | version u32 | class_count u32 | C u32 | H u32 | W u32 |
//   sample_count u64 | per sample: label u32, C*H*W float32 LE
// ---------------------------------------------------------------------------

inline constexpr char kFeatureStoreMagic[5] = "FSCL";
inline constexpr std::uint32_t kFeatureStoreVersion = 1;
inline constexpr std::size_t kFeatureStoreHeaderBytes = 32;

inline void write_feature_store(const Dataset& dataset, const std::string& path) {
  dataset.validate();
  auto out = io::open_for_write(path);
  out.write(kFeatureStoreMagic, 4);
  io::put_u32(out, kFeatureStoreVersion);
  io::put_u32(out, dataset.class_count);
  io::put_u32(out, dataset.shape.channels);
  io::put_u32(out, dataset.shape.height);
  io::put_u32(out, dataset.shape.width);
  io::put_u64(out, dataset.samples.size());
  for (const auto& s : dataset.samples) {
    io::put_u32(out, s.label);
    io::put_f32_array(out, s.feature.data.data(), s.feature.data.size());
  }
  out.flush();
  if (!out) fail(ErrorCode::kIo, "write failed: " + path);
}

inline Dataset load_feature_store(const std::string& path, Split split = Split::kTrain) {
  auto in = io::open_for_read(path);
  io::expect_magic(in, kFeatureStoreMagic);
  const auto version = io::get_u32(in, "version");
  if (version != kFeatureStoreVersion) {
    fail(ErrorCode::kUnsupportedVersion, "unsupported feature store version " + std::to_string(version));
  }
  Dataset ds;
  ds.split = split;
  ds.class_count = io::get_u32(in, "class count");
  ds.shape.channels = io::get_u32(in, "channels");
  ds.shape.height = io::get_u32(in, "height");
  ds.shape.width = io::get_u32(in, "width");
  const auto count = io::get_u64(in, "sample count");
  // Reserve only what the header claims if it is plausible; a corrupt count
  // surfaces as a truncation error below instead of a huge allocation.
  ds.samples.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, 1u << 16)));
  for (std::uint64_t n = 0; n < count; ++n) {
    LabeledSample s;
    s.label = io::get_u32(in, "label of sample " + std::to_string(n));
    if (s.label >= ds.class_count) {
      fail(ErrorCode::kLabelOutOfRange, "sample " + std::to_string(n) + " label " +
                                            std::to_string(s.label) + " >= class count " +
                                            std::to_string(ds.class_count));
    }
    s.feature = FeatureMap(ds.shape);
    io::get_f32_array(in, s.feature.data.data(), s.feature.data.size(),
                      "tensor of sample " + std::to_string(n));
    if (!is_valid_activation(s.feature)) {
      fail(ErrorCode::kInvalidValue, "sample " + std::to_string(n) + " has a negative or non-finite entry");
    }
    ds.samples.push_back(std::move(s));
  }
  io::expect_end(in, "feature store");
  return ds;
}

// ---------------------------------------------------------------------------
// Session splits
// ---------------------------------------------------------------------------

/// Base classes followed by S sessions of N classes, K shots each.
struct SessionSpec {
  std::vector<std::uint32_t> base_classes;
  std::vector<std::vector<std::uint32_t>> sessions;
  std::uint32_t shots_per_class = 5;
  std::uint64_t seed = 0;

  std::vector<std::uint32_t> all_classes() const {
    std::vector<std::uint32_t> out = base_classes;
    for (const auto& s : sessions) out.insert(out.end(), s.begin(), s.end());
    return out;
  }

  /// Disjointness and range checks against a dataset's class count.
  void validate(std::uint32_t class_count) const {
    std::set<std::uint32_t> seen;
    for (auto c : all_classes()) {
      require(c < class_count, ErrorCode::kLabelOutOfRange,
              "session spec references class " + std::to_string(c) + " but dataset has " +
                  std::to_string(class_count) + " classes");
      require(seen.insert(c).second, ErrorCode::kOverlappingClasses,
              "class " + std::to_string(c) + " appears in more than one session list");
    }
    require(!sessions.empty() ? shots_per_class >= 1 : true, ErrorCode::kInvalidArgument,
            "shots_per_class must be >= 1");
  }

  /// "B+SxN" when all sessions have the same width.
  std::string descriptor() const {
    std::string out = std::to_string(base_classes.size());
    if (sessions.empty()) return out;
    return out + "+" + std::to_string(sessions.size()) + "x" + std::to_string(sessions.front().size());
  }
};

inline void to_json(nlohmann::json& j, const SessionSpec& s) {
  j = nlohmann::json{{"base_classes", s.base_classes},
                     {"sessions", s.sessions},
                     {"shots_per_class", s.shots_per_class},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SessionSpec& s) {
  j.at("base_classes").get_to(s.base_classes);
  s.sessions = j.value("sessions", std::vector<std::vector<std::uint32_t>>{});
  s.shots_per_class = j.value("shots_per_class", 5u);
  s.seed = j.value("seed", std::uint64_t{0});
}

/// Contiguous split: classes [0, B) base, then S groups of N.
inline SessionSpec contiguous_session_spec(std::uint32_t base, std::uint32_t sessions, std::uint32_t ways,
                                           std::uint32_t shots, std::uint64_t seed) {
  SessionSpec spec;
  spec.shots_per_class = shots;
  spec.seed = seed;
  for (std::uint32_t c = 0; c < base; ++c) spec.base_classes.push_back(c);
  for (std::uint32_t s = 0; s < sessions; ++s) {
    std::vector<std::uint32_t> group;
    for (std::uint32_t n = 0; n < ways; ++n) group.push_back(base + s * ways + n);
    spec.sessions.push_back(std::move(group));
  }
  return spec;
}

struct IncrementalSession {
  std::vector<std::uint32_t> classes;
  Dataset train;            // exactly K shots per class
  Dataset test_cumulative;  // test samples of every class seen so far
};

struct SessionSplits {
  Dataset base_train;
  Dataset base_test;
  std::vector<IncrementalSession> incremental;
};

inline SessionSplits make_session_splits(const Dataset& train, const Dataset& test, const SessionSpec& spec) {
  require(train.shape == test.shape, ErrorCode::kShapeMismatch, "train and test shapes differ");
  spec.validate(std::min(train.class_count, test.class_count));

  std::set<std::uint32_t> seen(spec.base_classes.begin(), spec.base_classes.end());
  SessionSplits out;
  out.base_train = train.subset(seen);
  out.base_test = test.subset(seen);
  out.base_train.split = Split::kTrain;
  out.base_test.split = Split::kTest;

  for (std::size_t b = 0; b < spec.sessions.size(); ++b) {
    IncrementalSession session;
    session.classes = spec.sessions[b];
    session.train = Dataset{train.class_count, train.shape, Split::kTrain, {}};
    for (auto c : session.classes) {
      auto pool = train.indices_of(c);
      if (pool.size() < spec.shots_per_class) {
        fail(ErrorCode::kInsufficientSamples,
             "class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                 " train samples, need " + std::to_string(spec.shots_per_class));
      }
      // Uniform draw without replacement, one independent stream per (session, class).
      Rng rng(mix_seed(spec.seed, (static_cast<std::uint64_t>(b) << 32) | c));
      for (std::uint32_t k = 0; k < spec.shots_per_class; ++k) {
        const auto pick = k + rng.index(pool.size() - k);
        std::swap(pool[k], pool[pick]);
        session.train.samples.push_back(train.samples[pool[k]]);
      }
      seen.insert(c);
    }
    session.test_cumulative = test.subset(seen);
    session.test_cumulative.split = Split::kTest;
    out.incremental.push_back(std::move(session));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SynthSpec {
  std::uint32_t n_classes = 14;
  std::uint32_t per_class = 200;
  TensorShape shape{16, 8, 8};
  double mean_separation = 1.0;
  double noise_sd = 1.0;
  // Per-class, per-channel noise scale is drawn from U(1 - spread, 1 + spread).
  double scale_spread = 0.0;
  std::uint64_t seed = 0;
};

/// Class means and noise scales depend only on (seed, shape, n_classes); the
/// split selects an independent sample stream so train and test share classes.
///
/// mean[c, y, x]  = 1 + sep * (a[k, c] + 0.25 * b[k, c, y, x])
/// sample         = max(0, mean + noise_sd * r[k, c] * N(0, 1))
/// with a, b ~ U(0, 1) and r ~ U(1 - spread, 1 + spread) drawn per class k.
inline Dataset synth_gaussian_dataset(const SynthSpec& spec, Split split = Split::kTrain) {
  require(spec.n_classes >= 1, ErrorCode::kInvalidArgument, "n_classes must be >= 1");
  require(spec.per_class >= 1, ErrorCode::kInvalidArgument, "per_class must be >= 1");
  require(spec.shape.size() >= 1, ErrorCode::kInvalidArgument, "shape must be non-empty");
  require(spec.mean_separation >= 0.0, ErrorCode::kInvalidArgument, "mean_separation must be >= 0");
  require(spec.noise_sd > 0.0, ErrorCode::kInvalidArgument, "noise_sd must be positive");
  require(spec.scale_spread >= 0.0 && spec.scale_spread < 1.0, ErrorCode::kInvalidArgument,
          "scale_spread must be in [0, 1)");

  const auto& shape = spec.shape;
  Rng class_rng(mix_seed(spec.seed, 0));
  std::vector<std::vector<double>> means(spec.n_classes, std::vector<double>(shape.size()));
  std::vector<std::vector<double>> scales(spec.n_classes, std::vector<double>(shape.channels));
  for (std::uint32_t k = 0; k < spec.n_classes; ++k) {
    for (std::uint32_t c = 0; c < shape.channels; ++c) {
      const double level = class_rng.uniform();
      scales[k][c] = class_rng.uniform(1.0 - spec.scale_spread, 1.0 + spec.scale_spread);
      for (std::size_t p = 0; p < shape.plane(); ++p) {
        means[k][c * shape.plane() + p] = 1.0 + spec.mean_separation * (level + 0.25 * class_rng.uniform());
      }
    }
  }

  Rng sample_rng(mix_seed(spec.seed, split == Split::kTrain ? 1 : 2));
  Dataset ds{spec.n_classes, shape, split, {}};
  ds.samples.reserve(static_cast<std::size_t>(spec.n_classes) * spec.per_class);
  for (std::uint32_t k = 0; k < spec.n_classes; ++k) {
    for (std::uint32_t n = 0; n < spec.per_class; ++n) {
      LabeledSample s{FeatureMap(shape), k};
      for (std::uint32_t c = 0; c < shape.channels; ++c) {
        const double sd = spec.noise_sd * scales[k][c];
        for (std::size_t p = 0; p < shape.plane(); ++p) {
          const auto idx = c * shape.plane() + p;
          s.feature.data[idx] = static_cast<float>(std::max(0.0, means[k][idx] + sd * sample_rng.normal()));
        }
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

inline void to_json(nlohmann::json& j, const TensorShape& s) {
  j = std::vector<std::uint32_t>{s.channels, s.height, s.width};
}

inline void from_json(const nlohmann::json& j, TensorShape& s) {
  const auto v = j.get<std::vector<std::uint32_t>>();
  require(v.size() == 3, ErrorCode::kInvalidArgument, "shape must be [C, H, W]");
  s = TensorShape{v[0], v[1], v[2]};
}

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"n_classes", s.n_classes},
                     {"per_class", s.per_class},
                     {"shape", s.shape},
                     {"mean_separation", s.mean_separation},
                     {"noise_sd", s.noise_sd},
                     {"scale_spread", s.scale_spread},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  SynthSpec d;
  s.n_classes = j.value("n_classes", d.n_classes);
  s.per_class = j.value("per_class", d.per_class);
  s.shape = j.value("shape", d.shape);
  s.mean_separation = j.value("mean_separation", d.mean_separation);
  s.noise_sd = j.value("noise_sd", d.noise_sd);
  s.scale_spread = j.value("scale_spread", d.scale_spread);
  s.seed = j.value("seed", d.seed);
}

}  // namespace fscl
