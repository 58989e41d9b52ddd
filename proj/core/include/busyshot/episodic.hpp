#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "busyshot/dataset.hpp"

namespace busyshot {

struct EpisodeConfig {
  int ways = 5;
  int shots = 5;
  int queries_per_episode = 5;
  std::uint64_t seed = 0;
};

struct Query {
  std::size_t sample = 0;  // index into Corpus::samples
  int label = 0;           // position of the true class within Episode::classes
  bool operator==(const Query&) const = default;
};

struct Episode {
  std::vector<std::int64_t> classes;             // episode class k -> dataset class id
  std::vector<std::vector<std::size_t>> support;  // [k][shot] -> sample index
  std::vector<Query> queries;
  bool operator==(const Episode&) const = default;
};

/// Samples available to one split, grouped by class.
struct SampleSplit {
  std::vector<std::int64_t> classes;
  std::vector<std::size_t> samples;  // indices into Corpus::samples
};

struct ClassSplits {
  std::vector<std::int64_t> train, val, test;
};

struct DataSplits {
  SampleSplit train, val, test;
};

enum class SplitPolicy { ratio_80_10_10, ratio_60_20_20, provided_test };

/// Disjoint class sets covering `classes`. Ratio policies round val and test
/// counts to the nearest class; provided_test takes `test` as given and draws
/// a validation set of the same size from the rest.
ClassSplits make_class_splits(std::vector<std::int64_t> classes, SplitPolicy policy, std::uint64_t seed,
                              const std::vector<std::int64_t>& provided_test = {});

DataSplits assign_samples(const Corpus& corpus, const ClassSplits& splits);

/// Removes from train and val every sample whose image also appears in test.
DataSplits enforce_image_disjointness(const Corpus& corpus, DataSplits splits);

/// Indexes one split for repeated episode draws.
class EpisodeSampler {
 public:
  EpisodeSampler(const Corpus& corpus, const SampleSplit& split);

  /// Pure function of (config.seed, episode_index). Classes and samples are
  /// drawn without replacement and no image is used twice in one episode.
  /// Query j belongs to the j-th episode class modulo ways.
  Episode sample(const EpisodeConfig& config, std::uint64_t episode_index) const;

  /// Throws ConfigError naming the first class that cannot supply enough samples.
  void check_feasible(const EpisodeConfig& config) const;

  const std::map<std::int64_t, std::vector<std::size_t>>& by_class() const { return by_class_; }

 private:
  const Corpus& corpus_;
  std::vector<std::int64_t> classes_;
  std::map<std::int64_t, std::vector<std::size_t>> by_class_;
};

Episode sample_episode(const Corpus& corpus, const SampleSplit& split, const EpisodeConfig& config,
                       std::uint64_t episode_index);

/// Plain-text audit lists: {train,val,test}_classes.txt and {train,val,test}_images.txt.
void write_split_manifests(const std::filesystem::path& dir, const Corpus& corpus, const DataSplits& splits);

}  // namespace busyshot
