#pragma once

// Few-shot region proposal: support feature maps are masked-average-pooled,
// the per-shot vectors averaged into a class prototype, and every query pixel
// scored by cosine similarity to that prototype. Scores are mapped affinely
// from [-1,1] into [0,1] and bilinearly upsampled to image resolution.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "busyshot/encoder.hpp"
#include "busyshot/errors.hpp"
#include "busyshot/image.hpp"

namespace busyshot {

template <typename T>
struct BasicSimilarityMap {
  int height = 0;
  int width = 0;
  std::vector<T> values;  // cosine similarities in [-1,1]

  BasicSimilarityMap() = default;
  BasicSimilarityMap(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w) {}
  T at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

using SimilarityMap = BasicSimilarityMap<float>;

/// Mask-weighted spatial mean of a feature map.
template <typename T>
std::vector<T> masked_average_pool(const BasicFeatureMap<T>& features,
                                   const BasicSoftMask<T>& weights) {
  if (features.height != weights.height || features.width != weights.width) {
    throw ShapeError("mask " + std::to_string(weights.height) + "x" + std::to_string(weights.width) +
                     " does not match feature map " + std::to_string(features.height) + "x" +
                     std::to_string(features.width));
  }
  const std::size_t hw = weights.values.size();
  double total = 0.0;
  for (T m : weights.values) total += static_cast<double>(m);
  if (!(total > 0.0)) throw EmptyMaskError("support annotation has no foreground mass");
  std::vector<T> out(static_cast<std::size_t>(features.channels));
  for (int c = 0; c < features.channels; ++c) {
    const T* plane = features.values.data() + static_cast<std::size_t>(c) * hw;
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(weights.values[i]) * plane[i];
    out[static_cast<std::size_t>(c)] = static_cast<T>(acc / total);
  }
  return out;
}

/// Unweighted mean over shots of the masked-average-pooled support features.
template <typename T>
std::vector<T> class_prototype(std::span<const BasicFeatureMap<T>> support_features,
                               std::span<const BasicSoftMask<T>> support_masks) {
  if (support_features.empty()) throw ConfigError("prototype needs at least one shot");
  if (support_features.size() != support_masks.size()) {
    throw ShapeError("support features and masks differ in count");
  }
  const int d = support_features.front().channels;
  std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
  for (std::size_t k = 0; k < support_features.size(); ++k) {
    if (support_features[k].channels != d) throw ShapeError("support feature channels differ");
    const auto pooled = masked_average_pool(support_features[k], support_masks[k]);
    for (int c = 0; c < d; ++c) acc[static_cast<std::size_t>(c)] += pooled[static_cast<std::size_t>(c)];
  }
  std::vector<T> out(acc.size());
  const double n = static_cast<double>(support_features.size());
  for (std::size_t c = 0; c < acc.size(); ++c) out[c] = static_cast<T>(acc[c] / n);
  return out;
}

/// Pixel-wise cosine similarity between `prototype` and every query feature
/// vector. Pixels whose feature vector is exactly zero score 0.
template <typename T>
BasicSimilarityMap<T> similarity_map(std::span<const T> prototype,
                                     const BasicFeatureMap<T>& query_features) {
  if (static_cast<int>(prototype.size()) != query_features.channels) {
    throw ShapeError("prototype has " + std::to_string(prototype.size()) +
                     " channels, query features " + std::to_string(query_features.channels));
  }
  double pnorm = 0.0;
  for (T v : prototype) pnorm += static_cast<double>(v) * v;
  pnorm = std::sqrt(pnorm);
  if (!(pnorm > 0.0)) throw InputError("zero prototype: degenerate support class");
  const std::size_t hw = static_cast<std::size_t>(query_features.height) * query_features.width;
  std::vector<double> dot(hw, 0.0);
  std::vector<double> sq(hw, 0.0);
  for (int c = 0; c < query_features.channels; ++c) {
    const T* plane = query_features.values.data() + static_cast<std::size_t>(c) * hw;
    const double pc = prototype[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < hw; ++i) {
      dot[i] += pc * plane[i];
      sq[i] += static_cast<double>(plane[i]) * plane[i];
    }
  }
  BasicSimilarityMap<T> out(query_features.height, query_features.width);
  for (std::size_t i = 0; i < hw; ++i) {
    const double fnorm = std::sqrt(sq[i]);
    out.values[i] = fnorm > 0.0 ? static_cast<T>(std::clamp(dot[i] / (pnorm * fnorm), -1.0, 1.0))
                                : T(0);
  }
  return out;
}

/// Gradients of the similarity map w.r.t. the query features and the prototype.
/// `query_grad` must be sized like the query features and is accumulated into.
template <typename T>
void similarity_map_backward(std::span<const T> prototype, const BasicFeatureMap<T>& query_features,
                             const BasicSimilarityMap<T>& similarity,
                             std::span<const T> similarity_grad, BasicFeatureMap<T>& query_grad,
                             std::span<T> prototype_grad) {
  const std::size_t hw = static_cast<std::size_t>(query_features.height) * query_features.width;
  const int d = query_features.channels;
  double pnorm = 0.0;
  for (T v : prototype) pnorm += static_cast<double>(v) * v;
  pnorm = std::sqrt(pnorm);
  std::vector<double> fnorm(hw, 0.0);
  for (int c = 0; c < d; ++c) {
    const T* plane = query_features.values.data() + static_cast<std::size_t>(c) * hw;
    for (std::size_t i = 0; i < hw; ++i) fnorm[i] += static_cast<double>(plane[i]) * plane[i];
  }
  for (auto& v : fnorm) v = std::sqrt(v);
  // d cos / d f = p / (|p||f|) - cos f / |f|^2 ;  d cos / d p = f / (|p||f|) - cos p / |p|^2
  std::vector<double> pgrad(static_cast<std::size_t>(d), 0.0);
  for (int c = 0; c < d; ++c) {
    const T* plane = query_features.values.data() + static_cast<std::size_t>(c) * hw;
    T* gplane = query_grad.values.data() + static_cast<std::size_t>(c) * hw;
    const double pc = prototype[static_cast<std::size_t>(c)];
    double pacc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      if (fnorm[i] <= 0.0) continue;
      const double g = similarity_grad[i];
      if (g == 0.0) continue;
      const double cosv = similarity.values[i];
      const double f = plane[i];
      gplane[i] += static_cast<T>(g * (pc / (pnorm * fnorm[i]) - cosv * f / (fnorm[i] * fnorm[i])));
      pacc += g * (f / (pnorm * fnorm[i]) - cosv * pc / (pnorm * pnorm));
    }
    pgrad[static_cast<std::size_t>(c)] = pacc;
  }
  for (int c = 0; c < d; ++c) prototype_grad[static_cast<std::size_t>(c)] += static_cast<T>(pgrad[static_cast<std::size_t>(c)]);
}

/// Distributes a prototype gradient back onto one shot's feature map.
template <typename T>
void class_prototype_backward(std::span<const T> prototype_grad, const BasicSoftMask<T>& shot_mask,
                              int shots, BasicFeatureMap<T>& shot_grad) {
  const double total = shot_mask.mass();
  const std::size_t hw = shot_mask.values.size();
  for (int c = 0; c < shot_grad.channels; ++c) {
    const double gc = prototype_grad[static_cast<std::size_t>(c)] / (shots * total);
    T* plane = shot_grad.values.data() + static_cast<std::size_t>(c) * hw;
    for (std::size_t i = 0; i < hw; ++i) plane[i] += static_cast<T>(gc * shot_mask.values[i]);
  }
}

/// Area-average downsampling. Dims are zero-padded up to a multiple of factor.
template <typename T>
BasicSoftMask<T> downsample_mask(const BasicSoftMask<T>& mask, int factor) {
  if (factor < 1) throw ShapeError("downsample factor must be positive");
  const int oh = (mask.height + factor - 1) / factor;
  const int ow = (mask.width + factor - 1) / factor;
  BasicSoftMask<T> out(oh, ow);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int dy = 0; dy < factor; ++dy) {
        const int sy = y * factor + dy;
        if (sy >= mask.height) break;
        for (int dx = 0; dx < factor; ++dx) {
          const int sx = x * factor + dx;
          if (sx >= mask.width) break;
          s += mask.at(sy, sx);
        }
      }
      out.at(y, x) = static_cast<T>(s * inv);
    }
  }
  return out;
}

namespace detail {

struct LinearTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};

// Half-pixel-centre sampling positions for an upscale by `factor`.
inline std::vector<LinearTap> upsample_taps(int in, int out, int factor) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace detail

/// Bilinear upsampling of a low-resolution grid by `factor`, cropped to out_h x out_w.
template <typename T>
BasicSoftMask<T> upsample_bilinear(std::span<const T> grid, int in_h, int in_w, int factor,
                                   int out_h, int out_w) {
  if (grid.size() != static_cast<std::size_t>(in_h) * in_w) throw ShapeError("grid size mismatch");
  if (out_h > in_h * factor || out_w > in_w * factor) throw ShapeError("upsample target too large");
  const auto ty = detail::upsample_taps(in_h, out_h, factor);
  const auto tx = detail::upsample_taps(in_w, out_w, factor);
  BasicSoftMask<T> out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const auto& a = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < out_w; ++x) {
      const auto& b = tx[static_cast<std::size_t>(x)];
      const double top = grid[static_cast<std::size_t>(a.lo) * in_w + b.lo] * (1.0 - b.frac) +
                         grid[static_cast<std::size_t>(a.lo) * in_w + b.hi] * b.frac;
      const double bottom = grid[static_cast<std::size_t>(a.hi) * in_w + b.lo] * (1.0 - b.frac) +
                            grid[static_cast<std::size_t>(a.hi) * in_w + b.hi] * b.frac;
      out.at(y, x) = static_cast<T>(top * (1.0 - a.frac) + bottom * a.frac);
    }
  }
  return out;
}

/// Adjoint of upsample_bilinear.
template <typename T>
std::vector<T> upsample_bilinear_backward(const BasicSoftMask<T>& grad_out, int in_h, int in_w,
                                          int factor) {
  const auto ty = detail::upsample_taps(in_h, grad_out.height, factor);
  const auto tx = detail::upsample_taps(in_w, grad_out.width, factor);
  std::vector<double> acc(static_cast<std::size_t>(in_h) * in_w, 0.0);
  for (int y = 0; y < grad_out.height; ++y) {
    const auto& a = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < grad_out.width; ++x) {
      const auto& b = tx[static_cast<std::size_t>(x)];
      const double g = grad_out.at(y, x);
      acc[static_cast<std::size_t>(a.lo) * in_w + b.lo] += g * (1.0 - a.frac) * (1.0 - b.frac);
      acc[static_cast<std::size_t>(a.lo) * in_w + b.hi] += g * (1.0 - a.frac) * b.frac;
      acc[static_cast<std::size_t>(a.hi) * in_w + b.lo] += g * a.frac * (1.0 - b.frac);
      acc[static_cast<std::size_t>(a.hi) * in_w + b.hi] += g * a.frac * b.frac;
    }
  }
  return {acc.begin(), acc.end()};
}

/// (s + 1) / 2 followed by bilinear upsampling to out_h x out_w.
template <typename T>
BasicSoftMask<T> proposal_from_similarity(const BasicSimilarityMap<T>& similarity, int factor,
                                          int out_h, int out_w) {
  std::vector<T> unit(similarity.values.size());
  for (std::size_t i = 0; i < unit.size(); ++i) unit[i] = (similarity.values[i] + T(1)) / T(2);
  BasicSoftMask<T> out = upsample_bilinear(std::span<const T>(unit), similarity.height,
                                           similarity.width, factor, out_h, out_w);
  for (auto& v : out.values) v = std::clamp(v, T(0), T(1));
  return out;
}

inline SoftMask binarize(const SoftMask& mask, float threshold) {
  SoftMask out(mask.height, mask.width);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = mask.values[i] >= threshold ? 1.0f : 0.0f;
  }
  return out;
}

/// Intersection over union of two masks binarized at `threshold`. Two empty masks score 1.
double mask_iou(const SoftMask& predicted, const SoftMask& truth, float threshold = 0.5f);

struct ProposalOptions {
  std::optional<float> binarize_threshold;  // soft proposals when empty
};

/// Query mask for one support class: encodes supports and query, pools the
/// supports under their (downsampled) masks, and scores every query pixel.
SoftMask propose_region(const FeatureMapEncoder<float>& encoder,
                        std::span<const Image* const> support_images,
                        std::span<const SoftMask* const> support_masks, const Image& query_image,
                        const ProposalOptions& options = {});

/// Proposal from precomputed feature maps; the prototype path shared by
/// evaluation code that caches encoder outputs.
SoftMask propose_from_features(std::span<const float> prototype, const FeatureMap& query_features,
                               int factor, int height, int width, const ProposalOptions& options);

std::vector<float> prototype_from_features(std::span<const FeatureMap> support_features,
                                           std::span<const SoftMask* const> support_masks,
                                           int factor);

}  // namespace busyshot
