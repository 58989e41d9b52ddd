#include <gtest/gtest.h>

#include <set>

#include "busyshot/errors.hpp"
#include "busyshot/synth.hpp"

using namespace busyshot;

TEST(Synth, SceneIsDeterministicInSeed) {
  SceneSpec spec;
  spec.height = spec.width = 64;
  const auto a = generate_synthetic_scene(spec, 11);
  const auto b = generate_synthetic_scene(spec, 11);
  const auto c = generate_synthetic_scene(spec, 12);
  EXPECT_EQ(a.image, b.image);
  ASSERT_EQ(a.objects.size(), b.objects.size());
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    EXPECT_EQ(a.objects[i].class_id, b.objects[i].class_id);
    EXPECT_EQ(a.objects[i].mask, b.objects[i].mask);
  }
  EXPECT_NE(a.image, c.image);
}

TEST(Synth, ScenesAreBusyAndMasksAreDisjoint) {
  SceneSpec spec;
  spec.height = spec.width = 64;
  const double canvas = 64.0 * 64.0;
  double objects = 0.0;
  const int scenes = 200;
  for (int s = 0; s < scenes; ++s) {
    const auto scene = generate_synthetic_scene(spec, 1000 + static_cast<std::uint64_t>(s));
    const auto n = static_cast<int>(scene.objects.size());
    EXPECT_GE(n, spec.min_objects);
    EXPECT_LE(n, spec.max_objects);
    objects += n;
    std::set<std::int64_t> classes;
    std::vector<int> cover(64 * 64, 0);
    for (const auto& o : scene.objects) {
      classes.insert(o.class_id);
      EXPECT_GE(o.class_id, 0);
      EXPECT_LT(o.class_id, spec.num_classes);
      // half of the pre-occlusion area survives; 0.9 absorbs pixel rounding of the target
      EXPECT_GE(o.mask.mass(), spec.min_visible * spec.min_area * canvas * 0.9);
      EXPECT_NEAR(o.area_fraction, o.mask.mass() / canvas, 1e-12);
      for (std::size_t k = 0; k < cover.size(); ++k) cover[k] += o.mask.values[k] > 0.5f;
    }
    EXPECT_EQ(classes.size(), scene.objects.size());
    for (int v : cover) EXPECT_LE(v, 1);
  }
  EXPECT_NEAR(objects / scenes, 0.5 * (spec.min_objects + spec.max_objects), 0.5);
}

TEST(Synth, ClassPoolLimitsObjects) {
  SceneSpec spec;
  spec.height = spec.width = 64;
  const std::vector<int> pool{3, 17, 22};
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto scene = generate_synthetic_scene(spec, s, pool);
    EXPECT_EQ(scene.objects.size(), 3u);
    for (const auto& o : scene.objects) {
      EXPECT_TRUE(o.class_id == 3 || o.class_id == 17 || o.class_id == 22);
    }
  }
  EXPECT_THROW(generate_synthetic_scene(spec, 0, {}), ConfigError);
  EXPECT_THROW(generate_synthetic_scene(spec, 0, {40}), ConfigError);
}

TEST(Synth, CorpusCoversEveryClassAndRoundTripsMasks) {
  SceneSpec spec;
  spec.height = spec.width = 48;
  spec.num_classes = 12;
  const auto corpus = generate_synthetic_corpus(spec, 5, 3);
  ASSERT_EQ(corpus.pixels.size(), corpus.dataset.images.size());
  std::set<std::int64_t> seen;
  for (const auto& a : corpus.dataset.annotations) {
    seen.insert(a.category_id);
    EXPECT_EQ(kind_of(a.geometry), AnnotationKind::rle);
  }
  EXPECT_EQ(seen.size(), 12u);
  EXPECT_EQ(corpus.dataset.categories.size(), 12u);
  EXPECT_EQ(synthetic_class_name(0), synthetic_class_name(0));
  EXPECT_NE(synthetic_class_name(0), synthetic_class_name(1));
}

TEST(Synth, InvalidSpecsAreRejected) {
  SceneSpec spec;
  spec.min_objects = 6;
  spec.max_objects = 5;
  EXPECT_THROW(validate(spec), ConfigError);
  spec = {};
  spec.num_classes = kSynthShapes * kSynthColours + 1;
  EXPECT_THROW(validate(spec), ConfigError);
  spec = {};
  spec.min_visible = 1.5;
  EXPECT_THROW(validate(spec), ConfigError);
}
