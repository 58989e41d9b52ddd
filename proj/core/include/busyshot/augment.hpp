#pragma once

#include <cstdint>
#include <utility>

#include "busyshot/image.hpp"

namespace busyshot {

struct AugmentPolicy {
  double horizontal_flip_prob = 0.5;
  double rotation_deg = 15.0;   // angle drawn from [-r, r]
  double translation = 0.1;     // shift drawn from [-t, t] times the image size, per axis
  double scale_min = 0.8;
  double scale_max = 1.25;
  std::uint64_t seed = 0;
  int max_retries = 8;  // redraws when a transform pushes the mask out of frame
};

void validate(const AugmentPolicy& policy);

/// Flip about the vertical centre line, then rotate, scale and translate about the image centre.
struct GeometricTransform {
  bool flip = false;
  double angle_deg = 0.0;
  double scale = 1.0;
  double tx = 0.0;  // fractions of width / height
  double ty = 0.0;
  bool is_identity() const { return !flip && angle_deg == 0.0 && scale == 1.0 && tx == 0.0 && ty == 0.0; }
};

GeometricTransform draw_transform(const AugmentPolicy& policy, std::uint64_t draw_index, int attempt = 0);

/// Inverse-mapped bilinear resampling. Out-of-frame pixels take the image's
/// per-channel mean and mask value 0; the mask is clamped to [0,1].
std::pair<Image, SoftMask> apply_transform(const Image& image, const SoftMask& mask, const GeometricTransform& t);

/// Same transform for image and mask, deterministic per (policy.seed, draw_index).
std::pair<Image, SoftMask> augment_pair(const Image& image, const SoftMask& mask, const AugmentPolicy& policy,
                                        std::uint64_t draw_index);

}  // namespace busyshot
