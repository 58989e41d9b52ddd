#pragma once

// Synthetic busy scenes: coloured shapes on a textured background, several
// classes per image, with exact visible-region masks.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "busyshot/dataset.hpp"
#include "busyshot/image.hpp"

namespace busyshot {

inline constexpr int kSynthShapes = 8;
inline constexpr int kSynthColours = 8;

/// Class id = shape * kSynthColours + colour.
std::string synthetic_class_name(std::int64_t class_id);

struct SceneSpec {
  int height = 128;
  int width = 128;
  int num_classes = 40;
  int min_objects = 5;
  int max_objects = 10;
  double min_area = 0.02;  // fraction of the canvas, before occlusion
  double max_area = 0.10;
  double min_visible = 0.5;  // every object keeps at least this share of its pixels
  double max_rotation_deg = 10.0;
  int placement_retries = 60;
  int max_regenerations = 50;
};

void validate(const SceneSpec& spec);

struct SyntheticScene {
  RgbImage image;
  std::vector<AnnotatedSample> objects;  // painting order; masks exclude occluded pixels
};

/// Deterministic in (spec, seed). Objects come from distinct classes.
SyntheticScene generate_synthetic_scene(const SceneSpec& spec, std::uint64_t seed);

struct SyntheticCorpus {
  RawDataset dataset;  // RLE annotations, image files images/NNNNNN.png
  std::vector<RgbImage> pixels;
};

/// Objects come from distinct classes of `class_pool`;
/// the object count is capped at the pool size.
SyntheticScene generate_synthetic_scene(const SceneSpec& spec, std::uint64_t seed,
                                        const std::vector<int>& class_pool);

/// ceil(classes * scenes_per_class / mean objects per scene) scenes. With
/// `class_groups`, every scene draws all its objects from one group, so that
/// class-level splits along the same groups share no images.
SyntheticCorpus generate_synthetic_corpus(const SceneSpec& spec, int scenes_per_class,
                                          std::uint64_t seed,
                                          const std::vector<std::vector<int>>& class_groups = {});

/// Writes manifest.json and the PNG images under `dir`.
void write_synthetic_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

}  // namespace busyshot
