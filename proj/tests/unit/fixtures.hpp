#pragma once

#include "busyshot/dataset.hpp"
#include "busyshot/synth.hpp"

namespace busyshot::fixtures {

inline Corpus synthetic_corpus(int classes, int scenes_per_class, int size, std::uint64_t seed,
                               const std::vector<std::vector<int>>& groups = {}) {
  SceneSpec spec;
  spec.num_classes = classes;
  spec.height = spec.width = size;
  auto synth = generate_synthetic_corpus(spec, scenes_per_class, seed, groups);
  FilterConfig filter;
  filter.min_images_per_class = 0;
  return build_corpus(filter_dataset(synth.dataset, filter), std::move(synth.pixels));
}

}  // namespace busyshot::fixtures
