#pragma once

// Spatial augmentations on C x H x W feature maps: nearest-neighbour
// crop-resize, flips and quarter-turn rotations. Channels are never mixed.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>

#include <nlohmann/json.hpp>

#include "fscl/error.hpp"
#include "fscl/feature_store.hpp"
#include "fscl/random.hpp"

namespace fscl {

struct AugmentPolicy {
  double crop_scale_lo = 0.6;
  double crop_scale_hi = 1.0;
  double flip_probability = 0.5;
  // Probability of 0, 1, 2, 3 counter-clockwise quarter turns.
  std::array<double, 4> rotation_probabilities{0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0};

  static AugmentPolicy identity() {
    return AugmentPolicy{1.0, 1.0, 0.0, {1.0, 0.0, 0.0, 0.0}};
  }

  void validate() const {
    require(crop_scale_lo > 0.0 && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0,
            ErrorCode::kInvalidArgument, "crop_scale_range must satisfy 0 < lo <= hi <= 1");
    require(flip_probability >= 0.0 && flip_probability <= 1.0, ErrorCode::kInvalidArgument,
            "flip_probability must be in [0, 1]");
    double total = 0.0;
    for (double p : rotation_probabilities) {
      require(p >= 0.0 && p <= 1.0, ErrorCode::kInvalidArgument, "rotation probabilities must be in [0, 1]");
      total += p;
    }
    require(std::abs(total - 1.0) < 1e-9, ErrorCode::kInvalidArgument, "rotation probabilities must sum to 1");
  }
};

inline void to_json(nlohmann::json& j, const AugmentPolicy& p) {
  j = nlohmann::json{{"crop_scale_range", {p.crop_scale_lo, p.crop_scale_hi}},
                     {"flip_probability", p.flip_probability},
                     {"rotation_probabilities", p.rotation_probabilities}};
}

inline void from_json(const nlohmann::json& j, AugmentPolicy& p) {
  AugmentPolicy d;
  if (j.contains("crop_scale_range")) {
    const auto range = j.at("crop_scale_range").get<std::vector<double>>();
    require(range.size() == 2, ErrorCode::kInvalidArgument, "crop_scale_range must be [lo, hi]");
    p.crop_scale_lo = range[0];
    p.crop_scale_hi = range[1];
  } else {
    p.crop_scale_lo = d.crop_scale_lo;
    p.crop_scale_hi = d.crop_scale_hi;
  }
  p.flip_probability = j.value("flip_probability", d.flip_probability);
  p.rotation_probabilities = j.value("rotation_probabilities", d.rotation_probabilities);
  p.validate();
}

struct ViewPair {
  FeatureMap query;
  FeatureMap key;
};

/// Crops the h x w window at (top, left) and resizes it back to H x W with
/// out[i, j] = in[top + floor(i * h / H), left + floor(j * w / W)].
inline FeatureMap spatial_crop_resize(const FeatureMap& fm, std::uint32_t top, std::uint32_t left,
                                      std::uint32_t h, std::uint32_t w) {
  const auto& s = fm.shape;
  require(h >= 1 && w >= 1, ErrorCode::kInvalidArgument, "crop window must be at least 1x1");
  require(static_cast<std::uint64_t>(top) + h <= s.height && static_cast<std::uint64_t>(left) + w <= s.width,
          ErrorCode::kInvalidArgument, "crop window out of bounds");
  FeatureMap out(s);
  for (std::uint32_t c = 0; c < s.channels; ++c) {
    for (std::uint32_t i = 0; i < s.height; ++i) {
      const std::size_t src_i = top + static_cast<std::size_t>(i) * h / s.height;
      for (std::uint32_t j = 0; j < s.width; ++j) {
        const std::size_t src_j = left + static_cast<std::size_t>(j) * w / s.width;
        out.at(c, i, j) = fm.at(c, src_i, src_j);
      }
    }
  }
  return out;
}

inline FeatureMap horizontal_flip(const FeatureMap& fm) {
  const auto& s = fm.shape;
  FeatureMap out(s);
  for (std::uint32_t c = 0; c < s.channels; ++c)
    for (std::uint32_t i = 0; i < s.height; ++i)
      for (std::uint32_t j = 0; j < s.width; ++j) out.at(c, i, j) = fm.at(c, i, s.width - 1 - j);
  return out;
}

inline FeatureMap vertical_flip(const FeatureMap& fm) {
  const auto& s = fm.shape;
  FeatureMap out(s);
  for (std::uint32_t c = 0; c < s.channels; ++c)
    for (std::uint32_t i = 0; i < s.height; ++i)
      for (std::uint32_t j = 0; j < s.width; ++j) out.at(c, i, j) = fm.at(c, s.height - 1 - i, j);
  return out;
}

/// Counter-clockwise rotation by 90 degrees times `quarter_turns` (any sign).
inline FeatureMap rotate90(const FeatureMap& fm, int quarter_turns) {
  const auto& s = fm.shape;
  const int turns = ((quarter_turns % 4) + 4) % 4;
  if (turns % 2 == 1) {
    require(s.height == s.width, ErrorCode::kInvalidArgument,
            "odd quarter turns need a square grid, got " + to_string(s));
  }
  if (turns == 0) return fm;
  FeatureMap out(s);
  const std::uint32_t n_h = s.height, n_w = s.width;
  for (std::uint32_t c = 0; c < s.channels; ++c) {
    for (std::uint32_t i = 0; i < n_h; ++i) {
      for (std::uint32_t j = 0; j < n_w; ++j) {
        float v = 0.0f;
        switch (turns) {
          case 1: v = fm.at(c, j, n_w - 1 - i); break;
          case 2: v = fm.at(c, n_h - 1 - i, n_w - 1 - j); break;
          case 3: v = fm.at(c, n_h - 1 - j, i); break;
        }
        out.at(c, i, j) = v;
      }
    }
  }
  return out;
}

/// One random chain: crop-resize, optional flip, then rotation.
inline FeatureMap augment_once(const FeatureMap& fm, const AugmentPolicy& policy, Rng& rng) {
  const auto& s = fm.shape;
  const double scale = rng.uniform(policy.crop_scale_lo, policy.crop_scale_hi);
  auto side = [scale](std::uint32_t full) {
    const auto len = static_cast<std::uint32_t>(std::lround(scale * full));
    return std::clamp<std::uint32_t>(len, 1, full);
  };
  const std::uint32_t h = side(s.height), w = side(s.width);
  const auto top = static_cast<std::uint32_t>(rng.index(s.height - h + 1));
  const auto left = static_cast<std::uint32_t>(rng.index(s.width - w + 1));
  FeatureMap out = spatial_crop_resize(fm, top, left, h, w);

  if (rng.bernoulli(policy.flip_probability)) out = horizontal_flip(out);

  const double u = rng.uniform();
  int turns = 0;
  double cumulative = 0.0;
  for (int t = 0; t < 4; ++t) {
    cumulative += policy.rotation_probabilities[t];
    if (u < cumulative) {
      turns = t;
      break;
    }
    turns = t;
  }
  // Fall back to zero turns when the draw lands past the last non-zero bin.
  if (policy.rotation_probabilities[turns] == 0.0) turns = 0;
  return rotate90(out, turns);
}

inline ViewPair sample_view_pair(const FeatureMap& fm, const AugmentPolicy& policy, Rng& rng) {
  ViewPair views;
  views.query = augment_once(fm, policy, rng);
  views.key = augment_once(fm, policy, rng);
  return views;
}

}  // namespace fscl
