#pragma once

// Binary Lovász-Softmax: a convex surrogate of the Jaccard loss obtained from
// the Lovász extension, evaluated on per-pixel errors sorted in decreasing order.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "busyshot/errors.hpp"

namespace busyshot {

/// Weights g_i = J(i) - J(i-1) for labels already sorted by decreasing error,
/// where J(i) is the Jaccard loss when the first i pixels are mispredicted:
/// J(i) = 1 - |FG \ first_i| / |FG u first_i|, J(0) = 0.
template <typename L>
std::vector<double> lovasz_grad(std::span<const L> sorted_labels) {
  const std::size_t n = sorted_labels.size();
  if (n == 0) throw ShapeError("lovasz_grad needs at least one pixel");
  double foreground = 0.0;
  for (L v : sorted_labels) foreground += static_cast<double>(v);
  std::vector<double> g(n);
  double cum_fg = 0.0;
  double cum_bg = 0.0;
  double prev = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = static_cast<double>(sorted_labels[i]);
    cum_fg += y;
    cum_bg += 1.0 - y;
    const double jaccard = 1.0 - (foreground - cum_fg) / (foreground + cum_bg);
    g[i] = jaccard - prev;
    prev = jaccard;
  }
  return g;
}

template <typename T>
struct LovaszResult {
  double loss = 0.0;
  std::vector<T> grad;          // d loss / d prediction
  bool all_background = false;  // loss fell back to mean(prediction)
};

/// Loss and subgradient for one mask. Errors are |y - p|; sorting is stable
/// so equal errors keep their original order. An all-background label
/// vector has no Jaccard loss and contributes mean(p) instead.
template <typename T, typename L>
LovaszResult<T> lovasz_loss_with_grad(std::span<const T> predictions, std::span<const L> labels) {
  if (predictions.size() != labels.size()) {
    throw ShapeError("prediction and label lengths differ");
  }
  const std::size_t n = predictions.size();
  if (n == 0) throw ShapeError("empty mask");
  LovaszResult<T> out;
  out.grad.assign(n, T(0));
  bool any_foreground = false;
  for (L y : labels) {
    if (y != L(0) && y != L(1)) throw InputError("lovasz labels must be 0 or 1");
    any_foreground = any_foreground || y == L(1);
  }
  if (!any_foreground) {
    double s = 0.0;
    for (T p : predictions) s += static_cast<double>(p);
    out.loss = s / static_cast<double>(n);
    std::fill(out.grad.begin(), out.grad.end(), static_cast<T>(1.0 / static_cast<double>(n)));
    out.all_background = true;
    return out;
  }
  std::vector<double> errors(n);
  for (std::size_t i = 0; i < n; ++i) {
    errors[i] = std::abs(static_cast<double>(labels[i]) - static_cast<double>(predictions[i]));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });
  std::vector<L> sorted(n);
  for (std::size_t i = 0; i < n; ++i) sorted[i] = labels[order[i]];
  const std::vector<double> g = lovasz_grad(std::span<const L>(sorted));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t px = order[i];
    out.loss += errors[px] * g[i];
    // d|y - p|/dp: -1 on foreground, +1 on background
    const double sign = labels[px] == L(1) ? -1.0 : 1.0;
    out.grad[px] = static_cast<T>(sign * g[i]);
  }
  return out;
}

template <typename T, typename L>
double lovasz_loss(std::span<const T> predictions, std::span<const L> labels) {
  return lovasz_loss_with_grad(predictions, labels).loss;
}

/// Mean of per-image losses.
template <typename T, typename L>
double lovasz_loss_batch(std::span<const std::vector<T>> predictions,
                         std::span<const std::vector<L>> labels) {
  if (predictions.size() != labels.size() || predictions.empty()) {
    throw ShapeError("batch sizes differ or batch is empty");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    total += lovasz_loss(std::span<const T>(predictions[i]), std::span<const L>(labels[i]));
  }
  return total / static_cast<double>(predictions.size());
}

}  // namespace busyshot
