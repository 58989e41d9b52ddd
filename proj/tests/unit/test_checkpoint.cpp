#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "busyshot/checkpoint.hpp"
#include "busyshot/errors.hpp"

using namespace busyshot;

namespace {

std::filesystem::path temp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(3, h, w);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

}  // namespace

TEST(Checkpoint, ContainerRoundTrip) {
  Checkpoint c;
  c.kind = "embedding_encoder";
  c.config = {{"a", 1}};
  c.metadata = {{"epoch", 7}, {"note", "x"}};
  c.arrays = {{"w", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"b", {1}, {-0.5f}}};
  save_checkpoint(temp("busyshot_ck.bin"), c);
  const Checkpoint d = load_checkpoint(temp("busyshot_ck.bin"));
  EXPECT_EQ(d.kind, c.kind);
  EXPECT_EQ(d.config, c.config);
  EXPECT_EQ(d.metadata, c.metadata);
  EXPECT_EQ(d.arrays, c.arrays);
  ASSERT_NE(d.find("b"), nullptr);
  EXPECT_EQ(d.find("zzz"), nullptr);
}

TEST(Checkpoint, RejectsForeignAndTruncatedFiles) {
  std::ofstream(temp("busyshot_not_ck.bin")) << "hello world, not a checkpoint";
  EXPECT_THROW(load_checkpoint(temp("busyshot_not_ck.bin")), DataError);
  EXPECT_THROW(load_checkpoint(temp("busyshot_missing_ck.bin")), DataError);

  Checkpoint c;
  c.kind = "embedding_encoder";
  c.arrays = {{"w", {100}, std::vector<float>(100, 1.0f)}};
  save_checkpoint(temp("busyshot_trunc.bin"), c);
  std::filesystem::resize_file(temp("busyshot_trunc.bin"), std::filesystem::file_size(temp("busyshot_trunc.bin")) - 8);
  EXPECT_THROW(load_checkpoint(temp("busyshot_trunc.bin")), DataError);
}

TEST(Checkpoint, EncodersRebuildWithIdenticalOutputs) {
  BackboneConfig cfg;
  cfg.input_channels = 4;
  cfg.widths = {8, 12};
  cfg.norm_groups = 4;
  cfg.stats.mean = {0.1f, 0.2f, 0.3f};
  EmbeddingEncoder<float> enc(cfg, 5);
  save_checkpoint(temp("busyshot_emb.bin"), make_checkpoint(enc));
  const EmbeddingEncoder<float> back = embedding_encoder_from(load_checkpoint(temp("busyshot_emb.bin")));
  EXPECT_EQ(back.backbone().config(), cfg);
  const Image img = random_image(16, 12, 1);
  const SoftMask m = SoftMask::ones(16, 12);
  EXPECT_EQ(encode_embedding(enc, img, &m), encode_embedding(back, img, &m));

  BackboneConfig rcfg = FeatureMapEncoder<float>::default_config();
  rcfg.widths = {8, 8, 16};
  rcfg.head_norm = false;
  FeatureMapEncoder<float> rpn(rcfg, 6);
  save_checkpoint(temp("busyshot_fm.bin"), make_checkpoint(rpn));
  const FeatureMapEncoder<float> rback = feature_map_encoder_from(load_checkpoint(temp("busyshot_fm.bin")));
  EXPECT_EQ(rback.backbone().config(), rcfg);
  EXPECT_EQ(encode_feature_map(rpn, img).values, encode_feature_map(rback, img).values);
}

TEST(Checkpoint, WrongKindIsRejected) {
  EmbeddingEncoder<float> enc(BackboneConfig{}, 0);
  EXPECT_THROW(feature_map_encoder_from(make_checkpoint(enc)), DataError);
}
