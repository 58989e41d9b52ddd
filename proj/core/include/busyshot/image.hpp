#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "busyshot/errors.hpp"

namespace busyshot {

/// 8-bit RGB pixels in row-major HWC order; the storage format of corpora.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  std::uint8_t& at(int y, int x, int ch) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  }
  std::uint8_t at(int y, int x, int ch) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  }
  bool operator==(const RgbImage&) const = default;
};

/// Floating-point planar image (CHW) with intensities in [0,1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w),
        pixels(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int ch, int y, int x) {
    return pixels[(static_cast<std::size_t>(ch) * height + y) * width + x];
  }
  float at(int ch, int y, int x) const {
    return pixels[(static_cast<std::size_t>(ch) * height + y) * width + x];
  }
};

/// Per-pixel foreground weight in [0,1], same spatial dims as its image.
template <typename T>
struct BasicSoftMask {
  int height = 0;
  int width = 0;
  std::vector<T> values;

  BasicSoftMask() = default;
  BasicSoftMask(int h, int w, T fill = T(0))
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  static BasicSoftMask ones(int h, int w) { return BasicSoftMask(h, w, T(1)); }

  T& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  T at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }

  double mass() const {
    double s = 0.0;
    for (T v : values) s += v;
    return s;
  }
  bool operator==(const BasicSoftMask&) const = default;
};

using SoftMask = BasicSoftMask<float>;

Image to_image(const RgbImage& rgb);
RgbImage to_rgb(const Image& image);

/// Throws InputError unless every value lies in [0,1].
void check_mask_range(const SoftMask& mask);

RgbImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& image);

/// Grayscale PNG: 8-bit quantization of [0,1] values, or 1-bit (values >= 0.5).
void write_mask_png(const std::filesystem::path& path, const SoftMask& mask, bool one_bit = false);
SoftMask read_mask_png(const std::filesystem::path& path);

}  // namespace busyshot
