#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "busyshot/rpn.hpp"

using namespace busyshot;

namespace {

FeatureMap random_map(int c, int h, int w, std::mt19937_64& rng) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  FeatureMap f(c, h, w);
  for (auto& v : f.values) v = d(rng);
  return f;
}

SoftMask random_mask(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  SoftMask m(h, w);
  for (auto& v : m.values) v = u(rng) < 0.3f ? 0.0f : u(rng);
  m.values[0] = 0.5f;  // never empty
  return m;
}

Image random_image(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(3, h, w);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

}  // namespace

TEST(Rpn, MaskedAveragePoolMatchesLoopOracle) {
  std::mt19937_64 rng(41);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 1 + static_cast<int>(rng() % 6), h = 1 + static_cast<int>(rng() % 7),
              w = 1 + static_cast<int>(rng() % 7);
    const FeatureMap f = random_map(c, h, w, rng);
    const SoftMask m = random_mask(h, w, rng);
    const auto got = masked_average_pool(f, m);
    for (int ch = 0; ch < c; ++ch) {
      double num = 0.0, den = 0.0;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          num += static_cast<double>(m.at(y, x)) * f.at(ch, y, x);
          den += m.at(y, x);
        }
      }
      worst = std::max(worst, std::abs(got[static_cast<std::size_t>(ch)] - num / den));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Rpn, MaskedAveragePoolWorkedExample) {
  FeatureMap f(1, 2, 2);
  f.values = {1, 2, 3, 4};
  SoftMask m(2, 2);
  m.values = {1, 1, 0, 0};
  EXPECT_FLOAT_EQ(masked_average_pool(f, m)[0], 1.5f);
  m.values = {0, 0, 0, 1};
  EXPECT_FLOAT_EQ(masked_average_pool(f, m)[0], 4.0f);
  EXPECT_FLOAT_EQ(masked_average_pool(f, SoftMask::ones(2, 2))[0], 2.5f);
}

TEST(Rpn, EmptySupportMaskIsAnError) {
  FeatureMap f(2, 3, 3);
  EXPECT_THROW(masked_average_pool(f, SoftMask(3, 3)), EmptyMaskError);
  EXPECT_THROW(masked_average_pool(f, SoftMask(2, 3, 1.0f)), ShapeError);
}

TEST(Rpn, PrototypeIsUnweightedMeanOfShots) {
  FeatureMap a(2, 1, 2), b(2, 1, 2);
  a.values = {2, 2, 0, 0};
  b.values = {0, 0, 2, 2};
  SoftMask big(1, 2, 1.0f), small(1, 2);
  small.values = {0.1f, 0.0f};
  const std::vector<FeatureMap> maps{a, b};
  const std::vector<SoftMask> masks{big, small};
  const auto p = class_prototype(std::span<const FeatureMap>(maps), std::span<const SoftMask>(masks));
  EXPECT_FLOAT_EQ(p[0], 1.0f);
  EXPECT_FLOAT_EQ(p[1], 1.0f);
}

TEST(Rpn, PrototypeInvariantToShotOrder) {
  std::mt19937_64 rng(42);
  std::vector<FeatureMap> maps;
  std::vector<SoftMask> masks;
  for (int i = 0; i < 5; ++i) {
    maps.push_back(random_map(4, 3, 3, rng));
    masks.push_back(random_mask(3, 3, rng));
  }
  const auto p = class_prototype(std::span<const FeatureMap>(maps), std::span<const SoftMask>(masks));
  std::vector<int> order{3, 0, 4, 1, 2};
  std::vector<FeatureMap> m2;
  std::vector<SoftMask> k2;
  for (int i : order) {
    m2.push_back(maps[static_cast<std::size_t>(i)]);
    k2.push_back(masks[static_cast<std::size_t>(i)]);
  }
  const auto q = class_prototype(std::span<const FeatureMap>(m2), std::span<const SoftMask>(k2));
  for (std::size_t c = 0; c < p.size(); ++c) EXPECT_NEAR(p[c], q[c], 1e-6);
}

TEST(Rpn, CosineWorkedExamplesAndZeroPixel) {
  const std::vector<float> proto{1.0f, 0.0f};
  FeatureMap f(2, 1, 4);
  // pixels: (1,0), (-1,0), (1,1), (0,0)
  f.values = {1, -1, 1, 0, 0, 0, 1, 0};
  const auto s = similarity_map(std::span<const float>(proto), f);
  EXPECT_NEAR(s.values[0], 1.0f, 1e-6);
  EXPECT_NEAR(s.values[1], -1.0f, 1e-6);
  EXPECT_NEAR(s.values[2], 0.70710678f, 1e-6);
  EXPECT_EQ(s.values[3], 0.0f);
  const std::vector<float> zero{0.0f, 0.0f};
  EXPECT_THROW(similarity_map(std::span<const float>(zero), f), InputError);
}

TEST(Rpn, SimilarityRangeAndScaleInvariance) {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<float> scale(0.01f, 100.0f);
  for (int trial = 0; trial < 100; ++trial) {
    const FeatureMap f = random_map(6, 4, 5, rng);
    const FeatureMap pmap = random_map(6, 1, 1, rng);
    std::vector<float> proto = pmap.values;
    const auto s = similarity_map(std::span<const float>(proto), f);
    for (float v : s.values) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
    const float a = scale(rng);
    for (auto& v : proto) v *= a;
    FeatureMap g = f;
    // scale every pixel vector by its own positive factor
    std::vector<float> per_pixel(20);
    for (auto& v : per_pixel) v = scale(rng);
    for (int c = 0; c < 6; ++c) {
      for (int i = 0; i < 20; ++i) g.values[static_cast<std::size_t>(c * 20 + i)] *= per_pixel[static_cast<std::size_t>(i)];
    }
    const auto t = similarity_map(std::span<const float>(proto), g);
    for (std::size_t i = 0; i < s.values.size(); ++i) EXPECT_NEAR(s.values[i], t.values[i], 1e-6);
  }
}

TEST(Rpn, DownsampleWorkedExamplesAndMass) {
  SoftMask one(4, 4);
  one.at(1, 2) = 1.0f;
  const auto d = downsample_mask(one, 4);
  ASSERT_EQ(d.values.size(), 1u);
  EXPECT_FLOAT_EQ(d.values[0], 0.0625f);
  SoftMask half(2, 2);
  half.values = {1, 1, 0, 0};
  EXPECT_FLOAT_EQ(downsample_mask(half, 2).values[0], 0.5f);
  const auto ones = downsample_mask(SoftMask::ones(8, 8), 4);
  for (float v : ones.values) EXPECT_FLOAT_EQ(v, 1.0f);

  std::mt19937_64 rng(44);
  for (int trial = 0; trial < 50; ++trial) {
    const int f = 1 << (1 + rng() % 3);
    const SoftMask m = random_mask(f * (1 + static_cast<int>(rng() % 4)), f * (1 + static_cast<int>(rng() % 4)), rng);
    EXPECT_NEAR(downsample_mask(m, f).mass() * f * f, m.mass(), 1e-4);
  }
}

TEST(Rpn, UpsampleBackwardIsAdjoint) {
  std::mt19937_64 rng(45);
  std::normal_distribution<float> d(0.0f, 1.0f);
  const int h = 3, w = 5, factor = 4;
  std::vector<float> x(static_cast<std::size_t>(h * w));
  for (auto& v : x) v = d(rng);
  SoftMask y(h * factor - 2, w * factor - 1);
  for (auto& v : y.values) v = d(rng);
  const auto ux = upsample_bilinear(std::span<const float>(x), h, w, factor, y.height, y.width);
  const auto aty = upsample_bilinear_backward(y, h, w, factor);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < y.values.size(); ++i) lhs += static_cast<double>(ux.values[i]) * y.values[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += static_cast<double>(x[i]) * aty[i];
  EXPECT_NEAR(lhs, rhs, 1e-4);
}

TEST(Rpn, UpsamplePreservesConstants) {
  const std::vector<float> grid(6, 0.3f);
  const auto up = upsample_bilinear(std::span<const float>(grid), 2, 3, 4, 8, 12);
  for (float v : up.values) EXPECT_NEAR(v, 0.3f, 1e-6);
}

TEST(Rpn, ProposalRangeWithUntrainedEncoder) {
  std::mt19937_64 rng(46);
  FeatureMapEncoder<float> enc(FeatureMapEncoder<float>::default_config(), 3);
  for (int trial = 0; trial < 5; ++trial) {
    const Image s0 = random_image(30, 26, rng), s1 = random_image(30, 26, rng), q = random_image(30, 26, rng);
    const SoftMask m0 = random_mask(30, 26, rng), m1 = random_mask(30, 26, rng);
    const std::vector<const Image*> imgs{&s0, &s1};
    const std::vector<const SoftMask*> masks{&m0, &m1};
    const SoftMask p = propose_region(enc, imgs, masks, q);
    EXPECT_EQ(p.height, 30);
    EXPECT_EQ(p.width, 26);
    for (float v : p.values) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    ProposalOptions opts;
    opts.binarize_threshold = 0.5f;
    const SoftMask b = propose_region(enc, imgs, masks, q, opts);
    for (std::size_t i = 0; i < b.values.size(); ++i) {
      EXPECT_EQ(b.values[i], p.values[i] >= 0.5f ? 1.0f : 0.0f);
    }
  }
}

TEST(Rpn, ProposalRejectsEmptySupportMask) {
  std::mt19937_64 rng(47);
  FeatureMapEncoder<float> enc(FeatureMapEncoder<float>::default_config(), 3);
  const Image s = random_image(16, 16, rng), q = random_image(16, 16, rng);
  const SoftMask empty(16, 16);
  const std::vector<const Image*> imgs{&s};
  const std::vector<const SoftMask*> masks{&empty};
  EXPECT_THROW(propose_region(enc, imgs, masks, q), EmptyMaskError);
}

TEST(Rpn, MaskIouCountsBinarizedOverlap) {
  SoftMask a(1, 4), b(1, 4);
  a.values = {1, 1, 0, 0.6f};
  b.values = {1, 0, 0, 0.4f};
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(mask_iou(SoftMask(2, 2), SoftMask(2, 2)), 1.0);
}
