#include "busyshot/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

namespace busyshot {

Image to_image(const RgbImage& rgb) {
  Image out(3, rgb.height, rgb.width);
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = rgb.at(y, x, ch) / 255.0f;
    }
  }
  return out;
}

RgbImage to_rgb(const Image& image) {
  if (image.channels != 3) throw ShapeError("to_rgb needs a 3-channel image");
  RgbImage out(image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::clamp(image.at(ch, y, x), 0.0f, 1.0f);
        out.at(y, x, ch) = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return out;
}

void check_mask_range(const SoftMask& mask) {
  for (float v : mask.values) {
    if (!(v >= 0.0f && v <= 1.0f)) throw InputError("mask value outside [0,1]");
  }
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw DataError("cannot open " + path.string());
  return f;
}

// Decodes any PNG into 8-bit rows with the requested channel count (1 or 3).
std::vector<std::uint8_t> decode_png(const std::filesystem::path& path, int channels, int& height,
                                     int& width) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw DataError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  height = static_cast<int>(img.height);
  width = static_cast<int>(img.width);
  return buffer;
}

void encode_png(const std::filesystem::path& path, const std::uint8_t* rows, int height, int width,
                int color_type, int bit_depth) {
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("PNG encoding failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t stride =
      bit_depth == 1 ? (static_cast<std::size_t>(width) + 7) / 8
                     : static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rows + stride * y));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

RgbImage read_png(const std::filesystem::path& path) {
  RgbImage out;
  out.pixels = decode_png(path, 3, out.height, out.width);
  return out;
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  encode_png(path, image.pixels.data(), image.height, image.width, PNG_COLOR_TYPE_RGB, 8);
}

void write_mask_png(const std::filesystem::path& path, const SoftMask& mask, bool one_bit) {
  if (one_bit) {
    const std::size_t stride = (static_cast<std::size_t>(mask.width) + 7) / 8;
    std::vector<std::uint8_t> packed(stride * mask.height, 0);
    for (int y = 0; y < mask.height; ++y) {
      for (int x = 0; x < mask.width; ++x) {
        if (mask.at(y, x) >= 0.5f) packed[stride * y + x / 8] |= static_cast<std::uint8_t>(0x80 >> (x % 8));
      }
    }
    encode_png(path, packed.data(), mask.height, mask.width, PNG_COLOR_TYPE_GRAY, 1);
    return;
  }
  std::vector<std::uint8_t> gray(mask.values.size());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    gray[i] = static_cast<std::uint8_t>(std::lround(std::clamp(mask.values[i], 0.0f, 1.0f) * 255.0f));
  }
  encode_png(path, gray.data(), mask.height, mask.width, PNG_COLOR_TYPE_GRAY, 8);
}

SoftMask read_mask_png(const std::filesystem::path& path) {
  int h = 0;
  int w = 0;
  auto gray = decode_png(path, 1, h, w);
  SoftMask mask(h, w);
  for (std::size_t i = 0; i < gray.size(); ++i) mask.values[i] = gray[i] / 255.0f;
  return mask;
}

}  // namespace busyshot
