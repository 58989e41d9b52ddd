#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "busyshot/encoder.hpp"

using namespace busyshot;

namespace {

Image random_image(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(3, h, w);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

BackboneConfig small(int channels) {
  BackboneConfig c;
  c.input_channels = channels;
  c.widths = {8, 12, 16};
  c.norm_groups = 4;
  return c;
}

}  // namespace

TEST(Encoder, FeatureMapResolutionIsCeilOfQuarter) {
  std::mt19937_64 rng(71);
  BackboneConfig cfg = FeatureMapEncoder<float>::default_config();
  cfg.widths = {8, 8, 16};
  FeatureMapEncoder<float> enc(cfg, 1);
  EXPECT_EQ(enc.downsample_factor(), 4);
  EXPECT_EQ(FeatureMapEncoder<float>(FeatureMapEncoder<float>::default_config()).channels_out(), 128);
  for (auto [h, w] : {std::pair{16, 16}, std::pair{17, 30}, std::pair{33, 9}}) {
    const FeatureMap f = encode_feature_map(enc, random_image(h, w, rng));
    EXPECT_EQ(f.channels, 16);
    EXPECT_EQ(f.height, (h + 3) / 4);
    EXPECT_EQ(f.width, (w + 3) / 4);
  }
}

TEST(Encoder, EmbeddingHasWidthOfLastBlock) {
  std::mt19937_64 rng(72);
  EmbeddingEncoder<float> enc(small(3), 2);
  EXPECT_EQ(enc.embedding_dim(), 16);
  EXPECT_EQ(enc.spatial_divisor(), 8);
  const auto e = encode_embedding(enc, random_image(21, 19, rng), nullptr);
  EXPECT_EQ(e.size(), 16u);
  for (float v : e) EXPECT_TRUE(std::isfinite(v));
}

TEST(Encoder, ReflectPaddingMirrorsWithoutRepeatingTheEdge) {
  std::mt19937_64 rng(73);
  BackboneConfig cfg = small(3);
  cfg.stats.mean = {0, 0, 0};
  cfg.stats.stddev = {1, 1, 1};
  Backbone<float> b(cfg, false, 0);
  const Image img = random_image(5, 6, rng);
  const Image* batch[] = {&img};
  const Tensor<float> t = b.assemble(batch, {}, 4);
  ASSERT_EQ(t.h, 8);
  ASSERT_EQ(t.w, 8);
  EXPECT_EQ(t.at(0, 1, 5, 0), img.at(1, 3, 0));
  EXPECT_EQ(t.at(0, 1, 7, 0), img.at(1, 1, 0));
  EXPECT_EQ(t.at(0, 2, 0, 6), img.at(2, 0, 4));
  EXPECT_EQ(t.at(0, 0, 2, 3), img.at(0, 2, 3));
}

TEST(Encoder, InputsAreStandardizedPerChannel) {
  BackboneConfig cfg = small(3);
  cfg.stats.mean = {0.5f, 0.25f, 0.0f};
  cfg.stats.stddev = {0.5f, 0.25f, 2.0f};
  Backbone<float> b(cfg, false, 0);
  const Image img(3, 8, 8, 1.0f);
  const Image* batch[] = {&img};
  const Tensor<float> t = b.assemble(batch, {}, 8);
  EXPECT_FLOAT_EQ(t.at(0, 0, 0, 0), 1.0f);
  EXPECT_FLOAT_EQ(t.at(0, 1, 0, 0), 3.0f);
  EXPECT_FLOAT_EQ(t.at(0, 2, 0, 0), 0.5f);
}

TEST(Encoder, MaskChannelContract) {
  std::mt19937_64 rng(74);
  const Image img = random_image(16, 16, rng);
  const SoftMask m = SoftMask::ones(16, 16);
  EmbeddingEncoder<float> four(small(4), 3);
  EXPECT_THROW(encode_embedding(four, img, nullptr), ConfigError);
  EXPECT_NO_THROW(encode_embedding(four, img, &m));
  const SoftMask wrong_size(8, 16, 1.0f);
  EXPECT_THROW(encode_embedding(four, img, &wrong_size), ConfigError);
  SoftMask out_of_range(16, 16, 1.0f);
  out_of_range.at(3, 3) = 1.5f;
  EXPECT_THROW(encode_embedding(four, img, &out_of_range), InputError);

  EmbeddingEncoder<float> three(small(3), 3);
  EXPECT_THROW(encode_embedding(three, img, &m), ConfigError);
  BackboneConfig five = small(3);
  five.input_channels = 5;
  EXPECT_THROW(EmbeddingEncoder<float>{five}, ConfigError);
  BackboneConfig rpn4 = FeatureMapEncoder<float>::default_config();
  rpn4.input_channels = 4;
  EXPECT_THROW(FeatureMapEncoder<float>{rpn4}, ConfigError);
}

TEST(Encoder, RejectsBadPixelsAndMismatchedBatches) {
  std::mt19937_64 rng(75);
  EmbeddingEncoder<float> enc(small(3), 4);
  Image img = random_image(16, 16, rng);
  img.at(1, 2, 2) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(encode_embedding(enc, img, nullptr), InputError);
  EXPECT_THROW(encode_embedding(enc, Image(1, 16, 16), nullptr), ShapeError);
  const Image a = random_image(16, 16, rng), b = random_image(16, 24, rng);
  const Image* batch[] = {&a, &b};
  EXPECT_THROW(enc.assemble(batch), ShapeError);
}

TEST(Encoder, ExpandingToMaskChannelPreservesOutputs) {
  std::mt19937_64 rng(76);
  EmbeddingEncoder<float> rgb(small(3), 5);
  EmbeddingEncoder<float> four = expand_to_mask_channel(rgb);
  EXPECT_EQ(four.input_channels(), 4);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int trial = 0; trial < 5; ++trial) {
    const Image img = random_image(16, 16, rng);
    SoftMask m(16, 16);
    for (auto& v : m.values) v = u(rng);
    const auto a = encode_embedding(rgb, img, nullptr);
    const auto b = encode_embedding(four, img, &m);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
  }
  EmbeddingEncoder<float> already(small(4), 5);
  EXPECT_THROW(expand_to_mask_channel(already), ConfigError);
}

TEST(Encoder, SameSeedSameWeights) {
  std::mt19937_64 rng(77);
  const Image img = random_image(16, 16, rng);
  EmbeddingEncoder<float> a(small(3), 9), b(small(3), 9), c(small(3), 10);
  EXPECT_EQ(encode_embedding(a, img, nullptr), encode_embedding(b, img, nullptr));
  EXPECT_NE(encode_embedding(a, img, nullptr), encode_embedding(c, img, nullptr));
}
