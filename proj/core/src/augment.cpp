#include "busyshot/augment.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "busyshot/errors.hpp"
#include "busyshot/rng.hpp"

namespace busyshot {

void validate(const AugmentPolicy& p) {
  if (p.horizontal_flip_prob < 0.0 || p.horizontal_flip_prob > 1.0) {
    throw ConfigError("flip probability must lie in [0,1]");
  }
  if (p.rotation_deg < 0.0 || p.translation < 0.0) throw ConfigError("augmentation ranges must be nonnegative");
  if (!(p.scale_min > 0.0) || p.scale_max < p.scale_min) throw ConfigError("scale interval must be positive");
  if (p.max_retries < 0) throw ConfigError("max_retries must be nonnegative");
}

GeometricTransform draw_transform(const AugmentPolicy& p, std::uint64_t draw_index, int attempt) {
  KeyedRng rng(p.seed, {draw_index, static_cast<std::uint64_t>(attempt)});
  GeometricTransform t;
  t.flip = p.horizontal_flip_prob > 0.0 && rng.bernoulli(p.horizontal_flip_prob);
  t.angle_deg = p.rotation_deg > 0.0 ? rng.uniform(-p.rotation_deg, p.rotation_deg) : 0.0;
  // log-uniform so that s and 1/s are equally likely
  t.scale = p.scale_max > p.scale_min ? std::exp(rng.uniform(std::log(p.scale_min), std::log(p.scale_max)))
                                      : p.scale_min;
  t.tx = p.translation > 0.0 ? rng.uniform(-p.translation, p.translation) : 0.0;
  t.ty = p.translation > 0.0 ? rng.uniform(-p.translation, p.translation) : 0.0;
  return t;
}

std::pair<Image, SoftMask> apply_transform(const Image& image, const SoftMask& mask, const GeometricTransform& t) {
  if (mask.height != image.height || mask.width != image.width) {
    throw ShapeError("image and mask dims differ");
  }
  if (t.is_identity()) return {image, mask};
  const int h = image.height;
  const int w = image.width;
  const int channels = image.channels;
  std::vector<float> fill(static_cast<std::size_t>(channels), 0.0f);
  for (int c = 0; c < channels; ++c) {
    double s = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) s += image.at(c, y, x);
    }
    fill[static_cast<std::size_t>(c)] = static_cast<float>(s / (static_cast<double>(h) * w));
  }
  const double a = t.angle_deg * 3.141592653589793 / 180.0;
  const double ca = std::cos(a);
  const double sa = std::sin(a);
  const double cx = w / 2.0;
  const double cy = h / 2.0;
  const double shift_x = t.tx * w;
  const double shift_y = t.ty * h;

  Image out_img(channels, h, w);
  SoftMask out_mask(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // undo translation, scale, rotation, flip
      const double ox = (x + 0.5 - cx - shift_x) / t.scale;
      const double oy = (y + 0.5 - cy - shift_y) / t.scale;
      double ix = ca * ox + sa * oy;
      const double iy = -sa * ox + ca * oy;
      if (t.flip) ix = -ix;
      const double sx = ix + cx - 0.5;
      const double sy = iy + cy - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0;
      const double fy = sy - y0;
      const int xs[2] = {x0, x0 + 1};
      const int ys[2] = {y0, y0 + 1};
      const double wx[2] = {1.0 - fx, fx};
      const double wy[2] = {1.0 - fy, fy};
      double m = 0.0;
      for (int c = 0; c < channels; ++c) {
        double v = 0.0;
        for (int j = 0; j < 2; ++j) {
          for (int i = 0; i < 2; ++i) {
            const bool in = xs[i] >= 0 && xs[i] < w && ys[j] >= 0 && ys[j] < h;
            v += wx[i] * wy[j] * (in ? image.at(c, ys[j], xs[i]) : fill[static_cast<std::size_t>(c)]);
          }
        }
        out_img.at(c, y, x) = static_cast<float>(v);
      }
      for (int j = 0; j < 2; ++j) {
        for (int i = 0; i < 2; ++i) {
          const bool in = xs[i] >= 0 && xs[i] < w && ys[j] >= 0 && ys[j] < h;
          if (in) m += wx[i] * wy[j] * mask.at(ys[j], xs[i]);
        }
      }
      out_mask.at(y, x) = static_cast<float>(std::clamp(m, 0.0, 1.0));
    }
  }
  return {std::move(out_img), std::move(out_mask)};
}

std::pair<Image, SoftMask> augment_pair(const Image& image, const SoftMask& mask, const AugmentPolicy& policy,
                                        std::uint64_t draw_index) {
  validate(policy);
  const bool had_mass = mask.mass() > 0.0;
  for (int attempt = 0; attempt <= policy.max_retries; ++attempt) {
    auto out = apply_transform(image, mask, draw_transform(policy, draw_index, attempt));
    if (!had_mass || out.second.mass() > 0.0) return out;
  }
  return {image, mask};
}

}  // namespace busyshot
