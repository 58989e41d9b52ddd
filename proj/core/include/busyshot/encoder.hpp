#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "busyshot/errors.hpp"
#include "busyshot/image.hpp"
#include "busyshot/nn.hpp"
#include "busyshot/tensor.hpp"

namespace busyshot {

/// Per-channel RGB standardization statistics, gathered when a corpus is ingested.
struct InputStats {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.25f, 0.25f, 0.25f};
  bool operator==(const InputStats&) const = default;
};

struct BackboneConfig {
  int input_channels = 3;  // 4 = RGB plus localization mask
  std::vector<int> widths{32, 64, 128, 256};
  int norm_groups = 8;
  bool head_norm = true;  // group norm on the feature-map head's output
  InputStats stats;
  bool operator==(const BackboneConfig&) const = default;
};

/// Dense d-channel encoding of one image at reduced resolution.
template <typename T>
struct BasicFeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> values;  // CHW

  BasicFeatureMap() = default;
  BasicFeatureMap(int c, int h, int w, T fill = T(0))
      : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {}

  T& at(int ch, int y, int x) {
    return values[(static_cast<std::size_t>(ch) * height + y) * width + x];
  }
  T at(int ch, int y, int x) const {
    return values[(static_cast<std::size_t>(ch) * height + y) * width + x];
  }
};

using FeatureMap = BasicFeatureMap<float>;

template <typename T>
BasicFeatureMap<T> feature_map_of(const Tensor<T>& batch, int index) {
  BasicFeatureMap<T> fm(batch.c, batch.h, batch.w);
  auto src = batch.sample(index);
  std::copy(src.begin(), src.end(), fm.values.begin());
  return fm;
}

/// conv 3x3 -> group norm -> ReLU -> 2x2 max pool, where the last two are optional.
template <typename T>
class ConvBlock {
 public:
  ConvBlock(const std::string& prefix, int in, int out, int groups, bool activate, bool pool, bool normalize = true)
      : conv(prefix + ".conv", in, out),
        norm(prefix + ".norm", out, std::min(groups, out)),
        activate_(activate),
        pool_(pool),
        normalize_(normalize) {}

  bool pools() const { return pool_; }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = conv.forward(x);
    if (normalize_) y = norm.forward(y);
    if (activate_) y = relu.forward(y);
    if (pool_) y = pool.forward(y);
    return y;
  }

  Tensor<T> forward_train(const Tensor<T>& x) {
    Tensor<T> y = conv.forward_train(x);
    if (normalize_) y = norm.forward_train(y);
    if (activate_) y = relu.forward_train(y);
    if (pool_) y = pool.forward_train(y);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad, bool need_input_grad) {
    Tensor<T> g = pool_ ? pool.backward(grad) : grad;
    if (activate_) g = relu.backward(g);
    if (normalize_) g = norm.backward(g, true);
    return conv.backward(g, need_input_grad);
  }

  std::vector<nn::Parameter<T>*> parameters() {
    if (!normalize_) return {&conv.weight, &conv.bias};
    return {&conv.weight, &conv.bias, &norm.gamma, &norm.beta};
  }

  nn::Conv2d<T> conv;
  nn::GroupNorm<T> norm;
  nn::ReLU<T> relu;
  nn::MaxPool2<T> pool;

 private:
  bool activate_ = true;
  bool pool_ = true;
  bool normalize_ = true;
};

/// Stack of ConvBlocks. With a feature-map head the last block emits its
/// normalized pre-activation output at full block resolution; otherwise
/// every block pools.
template <typename T>
class Backbone {
 public:
  Backbone(BackboneConfig config, bool feature_map_head, std::uint64_t seed)
      : config_(std::move(config)), feature_map_head_(feature_map_head) {
    if (config_.input_channels != 3 && config_.input_channels != 4) {
      throw ConfigError("encoder input must have 3 or 4 channels");
    }
    if (config_.widths.empty()) throw ConfigError("backbone needs at least one block");
    std::mt19937_64 rng(seed);
    int in = config_.input_channels;
    for (std::size_t i = 0; i < config_.widths.size(); ++i) {
      const bool last = i + 1 == config_.widths.size();
      const bool head = last && feature_map_head_;
      blocks_.emplace_back("block" + std::to_string(i), in, config_.widths[i], config_.norm_groups,
                           !head, !head, !head || config_.head_norm);
      blocks_.back().conv.init_kaiming(rng);
      in = config_.widths[i];
    }
  }

  const BackboneConfig& config() const { return config_; }
  bool feature_map_head() const { return feature_map_head_; }
  std::size_t block_count() const { return blocks_.size(); }
  ConvBlock<T>& block(std::size_t i) { return blocks_[i]; }
  const ConvBlock<T>& block(std::size_t i) const { return blocks_[i]; }

  /// Ratio between input and output resolution.
  int downsample_factor() const {
    int f = 1;
    for (const auto& b : blocks_) f *= b.pools() ? 2 : 1;
    return f;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = x;
    for (const auto& b : blocks_) y = b.forward(y);
    return y;
  }

  /// Caches activations only for blocks that backward() will visit.
  Tensor<T> forward_train(const Tensor<T>& x, std::size_t first_block = 0) {
    Tensor<T> y = x;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      y = i < first_block ? blocks_[i].forward(y) : blocks_[i].forward_train(y);
    }
    return y;
  }

  /// Backpropagates through blocks [first_block, end); earlier blocks receive no gradient.
  void backward(const Tensor<T>& grad, std::size_t first_block = 0) {
    Tensor<T> g = grad;
    for (std::size_t i = blocks_.size(); i-- > first_block;) {
      g = blocks_[i].backward(g, i > first_block);
    }
  }

  std::vector<nn::Parameter<T>*> parameters() {
    std::vector<nn::Parameter<T>*> out;
    for (auto& b : blocks_) {
      for (auto* p : b.parameters()) out.push_back(p);
    }
    return out;
  }

  /// Normalizes RGB, appends the mask channel when configured, and
  /// reflect-pads height and width up to a multiple of `divisor`.
  Tensor<T> assemble(std::span<const Image* const> images, std::span<const SoftMask* const> masks,
                     int divisor) const {
    if (images.empty()) throw ShapeError("empty image batch");
    const bool with_mask = config_.input_channels == 4;
    if (with_mask && masks.size() != images.size()) {
      throw ConfigError("4-channel encoder requires one mask per image");
    }
    if (!with_mask && !masks.empty()) {
      throw ConfigError("3-channel encoder does not accept masks");
    }
    const int h = images.front()->height;
    const int w = images.front()->width;
    const int ph = (h + divisor - 1) / divisor * divisor;
    const int pw = (w + divisor - 1) / divisor * divisor;
    if (ph - h >= h || pw - w >= w) throw ShapeError("image too small for reflect padding");
    Tensor<T> out(static_cast<int>(images.size()), config_.input_channels, ph, pw);
    for (std::size_t n = 0; n < images.size(); ++n) {
      const Image& img = *images[n];
      if (img.channels != 3) {
        throw ShapeError("encoder input must have 3 colour channels, got " +
                         std::to_string(img.channels));
      }
      if (img.height != h || img.width != w) throw ShapeError("images in a batch differ in size");
      const SoftMask* mask = with_mask ? masks[n] : nullptr;
      if (with_mask) {
        if (mask == nullptr) throw ConfigError("missing mask for 4-channel encoder");
        if (mask->height != h || mask->width != w) {
          throw ConfigError("mask resolution " + std::to_string(mask->height) + "x" +
                            std::to_string(mask->width) + " does not match image " +
                            std::to_string(h) + "x" + std::to_string(w));
        }
        check_mask_range(*mask);
      }
      for (int y = 0; y < ph; ++y) {
        const int sy = reflect(y, h);
        for (int x = 0; x < pw; ++x) {
          const int sx = reflect(x, w);
          for (int ch = 0; ch < 3; ++ch) {
            const float v = img.at(ch, sy, sx);
            if (!std::isfinite(v)) throw InputError("non-finite pixel value");
            out.at(static_cast<int>(n), ch, y, x) =
                static_cast<T>((v - config_.stats.mean[ch]) / config_.stats.stddev[ch]);
          }
          if (mask) out.at(static_cast<int>(n), 3, y, x) = static_cast<T>(mask->at(sy, sx));
        }
      }
    }
    return out;
  }

 private:
  static int reflect(int i, int n) { return i < n ? i : 2 * n - 2 - i; }

  BackboneConfig config_;
  bool feature_map_head_ = false;
  std::vector<ConvBlock<T>> blocks_;
};

/// Image -> dense feature map for region proposal. Output resolution is
/// ceil(h / factor) x ceil(w / factor); inputs are reflect-padded first.
template <typename T>
class FeatureMapEncoder {
 public:
  explicit FeatureMapEncoder(BackboneConfig config = default_config(), std::uint64_t seed = 0)
      : backbone_(std::move(config), true, seed) {
    if (backbone_.config().input_channels != 3) {
      throw ConfigError("feature map encoder takes RGB input only");
    }
  }

  /// Three blocks, the last one unpooled: factor 4, 128 channels.
  static BackboneConfig default_config() {
    BackboneConfig c;
    c.widths = {32, 64, 128};
    return c;
  }

  int downsample_factor() const { return backbone_.downsample_factor(); }
  int channels_out() const { return backbone_.config().widths.back(); }

  Tensor<T> assemble(std::span<const Image* const> images) const {
    return backbone_.assemble(images, {}, downsample_factor());
  }
  Tensor<T> forward(const Tensor<T>& batch) const { return backbone_.forward(batch); }
  Tensor<T> forward_train(const Tensor<T>& batch) { return backbone_.forward_train(batch); }
  void backward(const Tensor<T>& grad) { backbone_.backward(grad, 0); }

  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }

 private:
  Backbone<T> backbone_;
};

/// Image (+ optional mask channel) -> fixed-length embedding via global average pooling.
template <typename T>
class EmbeddingEncoder {
 public:
  explicit EmbeddingEncoder(BackboneConfig config = BackboneConfig{}, std::uint64_t seed = 0)
      : backbone_(std::move(config), false, seed) {}

  int input_channels() const { return backbone_.config().input_channels; }
  int embedding_dim() const { return backbone_.config().widths.back(); }
  int spatial_divisor() const { return backbone_.downsample_factor(); }

  Tensor<T> assemble(std::span<const Image* const> images,
                     std::span<const SoftMask* const> masks = {}) const {
    return backbone_.assemble(images, masks, spatial_divisor());
  }

  /// N x embedding_dim x 1 x 1.
  Tensor<T> forward(const Tensor<T>& batch) const { return pool_.forward(backbone_.forward(batch)); }

  Tensor<T> forward_train(const Tensor<T>& batch, std::size_t first_block = 0) {
    return pool_.forward_train(backbone_.forward_train(batch, first_block));
  }

  void backward(const Tensor<T>& grad, std::size_t first_block = 0) {
    backbone_.backward(pool_.backward(grad), first_block);
  }

  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }

 private:
  Backbone<T> backbone_;
  nn::GlobalAvgPool<T> pool_;
};

/// Copies parameter values between backbones of identical architecture.
template <typename To, typename From>
void copy_parameters(Backbone<To>& dst, Backbone<From>& src) {
  auto d = dst.parameters();
  auto s = src.parameters();
  if (d.size() != s.size()) throw ShapeError("backbone parameter lists differ");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i]->size() != s[i]->size()) throw ShapeError("parameter size mismatch: " + d[i]->name);
    for (std::size_t j = 0; j < d[i]->size(); ++j) d[i]->value[j] = static_cast<To>(s[i]->value[j]);
  }
}

/// Builds a 4-channel encoder from a 3-channel one: RGB kernels are copied and
/// mask-channel kernels start at zero, so initial outputs are unchanged.
template <typename T>
EmbeddingEncoder<T> expand_to_mask_channel(EmbeddingEncoder<T>& rgb) {
  if (rgb.input_channels() != 3) throw ConfigError("expand_to_mask_channel needs a 3-channel encoder");
  BackboneConfig cfg = rgb.backbone().config();
  cfg.input_channels = 4;
  EmbeddingEncoder<T> out(cfg, 0);
  auto dst = out.backbone().parameters();
  auto src = rgb.backbone().parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (i == 0) {
      const auto& shape = src[0]->shape;  // out, in, k, k
      const int co = shape[0];
      const int kk = shape[2] * shape[3];
      for (int o = 0; o < co; ++o) {
        for (int c = 0; c < 4; ++c) {
          for (int k = 0; k < kk; ++k) {
            dst[0]->value[(static_cast<std::size_t>(o) * 4 + c) * kk + k] =
                c < 3 ? src[0]->value[(static_cast<std::size_t>(o) * 3 + c) * kk + k] : T(0);
          }
        }
      }
      continue;
    }
    dst[i]->value = src[i]->value;
  }
  return out;
}

/// Encodes one RGB image into a feature map.
FeatureMap encode_feature_map(const FeatureMapEncoder<float>& encoder, const Image& image);

/// Encodes one image; `mask` must be given exactly when the encoder has 4 input channels.
std::vector<float> encode_embedding(const EmbeddingEncoder<float>& encoder, const Image& image,
                                    const SoftMask* mask);

}  // namespace busyshot
