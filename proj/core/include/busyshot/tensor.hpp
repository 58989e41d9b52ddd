#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "busyshot/errors.hpp"

namespace busyshot {

/// Dense batch of feature planes in NCHW order.
template <typename T>
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int batch, int channels, int height, int width, T fill = T(0))
      : n(batch), c(channels), h(height), w(width),
        data(static_cast<std::size_t>(batch) * channels * height * width, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_size() const { return plane_size() * c; }
  bool empty() const { return data.empty(); }

  std::size_t index(int in, int ic, int y, int x) const {
    return ((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x;
  }
  T& at(int in, int ic, int y, int x) { return data[index(in, ic, y, x)]; }
  const T& at(int in, int ic, int y, int x) const { return data[index(in, ic, y, x)]; }

  std::span<T> plane(int in, int ic) {
    return {data.data() + index(in, ic, 0, 0), plane_size()};
  }
  std::span<const T> plane(int in, int ic) const {
    return {data.data() + index(in, ic, 0, 0), plane_size()};
  }
  std::span<T> sample(int in) { return {data.data() + index(in, 0, 0, 0), sample_size()}; }
  std::span<const T> sample(int in) const {
    return {data.data() + index(in, 0, 0, 0), sample_size()};
  }

  bool same_shape(const Tensor& other) const {
    return n == other.n && c == other.c && h == other.h && w == other.w;
  }

  std::string shape_string() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  Tensor<To> out(src.n, src.c, src.h, src.w);
  for (std::size_t i = 0; i < src.size(); ++i) out.data[i] = static_cast<To>(src.data[i]);
  return out;
}

}  // namespace busyshot
