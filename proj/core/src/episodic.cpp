#include "busyshot/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_set>

#include "busyshot/errors.hpp"
#include "busyshot/rng.hpp"

namespace busyshot {

ClassSplits make_class_splits(std::vector<std::int64_t> classes, SplitPolicy policy, std::uint64_t seed,
                              const std::vector<std::int64_t>& provided_test) {
  std::sort(classes.begin(), classes.end());
  if (std::adjacent_find(classes.begin(), classes.end()) != classes.end()) {
    throw ConfigError("class list contains duplicates");
  }
  KeyedRng rng(seed, {0x5b11u});
  ClassSplits out;
  if (policy == SplitPolicy::provided_test) {
    const std::set<std::int64_t> test(provided_test.begin(), provided_test.end());
    std::vector<std::int64_t> rest;
    for (auto c : classes) {
      if (!test.contains(c)) rest.push_back(c);
    }
    for (auto c : test) {
      if (!std::binary_search(classes.begin(), classes.end(), c)) {
        throw ConfigError("provided test class " + std::to_string(c) + " is not in the class list");
      }
    }
    if (test.empty() || rest.size() <= test.size()) {
      throw ConfigError("too few classes outside the provided test split: " + std::to_string(rest.size()) +
                        " for " + std::to_string(test.size()) + " test classes");
    }
    keyed_shuffle(rest.begin(), rest.end(), rng);
    out.test.assign(test.begin(), test.end());
    out.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(test.size()));
    out.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(test.size()), rest.end());
  } else {
    const double frac = policy == SplitPolicy::ratio_80_10_10 ? 0.1 : 0.2;
    const auto n = static_cast<double>(classes.size());
    const auto held = static_cast<std::size_t>(std::llround(frac * n));
    if (held == 0 || 2 * held >= classes.size()) {
      throw ConfigError("too few classes (" + std::to_string(classes.size()) + ") for the split policy");
    }
    keyed_shuffle(classes.begin(), classes.end(), rng);
    out.val.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(held));
    out.test.assign(classes.begin() + static_cast<std::ptrdiff_t>(held),
                    classes.begin() + static_cast<std::ptrdiff_t>(2 * held));
    out.train.assign(classes.begin() + static_cast<std::ptrdiff_t>(2 * held), classes.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

DataSplits assign_samples(const Corpus& corpus, const ClassSplits& splits) {
  DataSplits out;
  out.train.classes = splits.train;
  out.val.classes = splits.val;
  out.test.classes = splits.test;
  const std::set<std::int64_t> tr(splits.train.begin(), splits.train.end());
  const std::set<std::int64_t> va(splits.val.begin(), splits.val.end());
  const std::set<std::int64_t> te(splits.test.begin(), splits.test.end());
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const auto c = corpus.samples[i].class_id;
    if (tr.contains(c)) out.train.samples.push_back(i);
    if (va.contains(c)) out.val.samples.push_back(i);
    if (te.contains(c)) out.test.samples.push_back(i);
  }
  return out;
}

DataSplits enforce_image_disjointness(const Corpus& corpus, DataSplits splits) {
  std::unordered_set<std::int64_t> test_images;
  for (auto i : splits.test.samples) test_images.insert(corpus.samples[i].image_id);
  auto prune = [&](SampleSplit& s) {
    std::erase_if(s.samples, [&](std::size_t i) { return test_images.contains(corpus.samples[i].image_id); });
  };
  prune(splits.train);
  prune(splits.val);
  return splits;
}

EpisodeSampler::EpisodeSampler(const Corpus& corpus, const SampleSplit& split)
    : corpus_(corpus), classes_(split.classes) {
  std::sort(classes_.begin(), classes_.end());
  for (auto c : classes_) by_class_[c];
  for (auto i : split.samples) {
    auto it = by_class_.find(corpus.samples.at(i).class_id);
    if (it != by_class_.end()) it->second.push_back(i);
  }
  for (auto& [c, v] : by_class_) std::sort(v.begin(), v.end());
}

void EpisodeSampler::check_feasible(const EpisodeConfig& config) const {
  if (config.ways < 1 || config.shots < 1 || config.queries_per_episode < 1) {
    throw ConfigError("ways, shots and queries must be positive");
  }
  if (static_cast<std::size_t>(config.ways) > classes_.size()) {
    throw ConfigError(std::to_string(config.ways) + "-way episodes need more than the " +
                      std::to_string(classes_.size()) + " classes in this split");
  }
  // a class drawn first receives ceil(queries / ways) queries
  const int per_class_queries = (config.queries_per_episode + config.ways - 1) / config.ways;
  const auto need = static_cast<std::size_t>(config.shots + per_class_queries);
  for (const auto& [c, v] : by_class_) {
    if (v.size() < need) {
      throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(v.size()) +
                        " samples, episodes need " + std::to_string(need));
    }
  }
}

Episode EpisodeSampler::sample(const EpisodeConfig& config, std::uint64_t episode_index) const {
  check_feasible(config);
  KeyedRng rng(config.seed, {episode_index});
  std::vector<std::int64_t> pool = classes_;
  keyed_shuffle(pool.begin(), pool.end(), rng);
  Episode ep;
  ep.classes.assign(pool.begin(), pool.begin() + config.ways);
  ep.support.resize(static_cast<std::size_t>(config.ways));

  std::vector<int> query_count(static_cast<std::size_t>(config.ways), 0);
  for (int j = 0; j < config.queries_per_episode; ++j) ++query_count[static_cast<std::size_t>(j % config.ways)];

  std::unordered_set<std::int64_t> used_images;
  std::vector<std::vector<std::size_t>> query_pick(static_cast<std::size_t>(config.ways));
  for (int k = 0; k < config.ways; ++k) {
    std::vector<std::size_t> cand = by_class_.at(ep.classes[static_cast<std::size_t>(k)]);
    keyed_shuffle(cand.begin(), cand.end(), rng);
    const int need = config.shots + query_count[static_cast<std::size_t>(k)];
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < cand.size() && static_cast<int>(picked.size()) < need; ++i) {
      if (used_images.insert(corpus_.samples[cand[i]].image_id).second) picked.push_back(cand[i]);
    }
    if (static_cast<int>(picked.size()) < need) {
      throw ConfigError("class " + std::to_string(ep.classes[static_cast<std::size_t>(k)]) +
                        " cannot supply " + std::to_string(need) + " samples from distinct images");
    }
    ep.support[static_cast<std::size_t>(k)].assign(picked.begin(), picked.begin() + config.shots);
    query_pick[static_cast<std::size_t>(k)].assign(picked.begin() + config.shots, picked.end());
  }
  std::vector<std::size_t> next(static_cast<std::size_t>(config.ways), 0);
  for (int j = 0; j < config.queries_per_episode; ++j) {
    const auto k = static_cast<std::size_t>(j % config.ways);
    ep.queries.push_back({query_pick[k][next[k]++], static_cast<int>(k)});
  }
  return ep;
}

Episode sample_episode(const Corpus& corpus, const SampleSplit& split, const EpisodeConfig& config,
                       std::uint64_t episode_index) {
  return EpisodeSampler(corpus, split).sample(config, episode_index);
}

void write_split_manifests(const std::filesystem::path& dir, const Corpus& corpus, const DataSplits& splits) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const SampleSplit& s) {
    std::ofstream classes(dir / (name + "_classes.txt"));
    for (auto c : s.classes) classes << c << '\n';
    std::set<std::int64_t> images;
    for (auto i : s.samples) images.insert(corpus.samples[i].image_id);
    std::ofstream imgs(dir / (name + "_images.txt"));
    for (auto id : images) imgs << id << '\n';
    if (!classes || !imgs) throw DataError("cannot write split manifests to " + dir.string());
  };
  write("train", splits.train);
  write("val", splits.val);
  write("test", splits.test);
}

}  // namespace busyshot
