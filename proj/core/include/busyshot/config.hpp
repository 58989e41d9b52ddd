#pragma once

// Run configuration. The file format is one `key = value` per line; `#`
// starts a comment. Keys and defaults are listed in README.md. Relative
// paths in `manifest` resolve against $BUSYSHOT_DATA_ROOT when it is set.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "busyshot/augment.hpp"
#include "busyshot/episodic.hpp"
#include "busyshot/optim.hpp"

namespace busyshot {

enum class LocalizationMode { none, support, oracle, propnet };

LocalizationMode parse_mode(const std::string& s);
std::string to_string(LocalizationMode m);
SplitPolicy parse_split_policy(const std::string& s);

struct RunConfig {
  std::string stage;

  std::filesystem::path manifest;
  std::filesystem::path output;  // checkpoint written by a training stage
  std::filesystem::path metrics;  // line-delimited JSON, appended
  std::filesystem::path split_dir;
  std::filesystem::path rpn_checkpoint;
  std::filesystem::path classifier_checkpoint;

  EpisodeConfig episode;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> eval_seeds;  // empty = {seed}
  int epochs = 100;
  int episodes_per_epoch = 500;
  int val_episodes = 100;
  int eval_episodes = 1000;
  int batch_size = 32;  // stage A images per step
  LocalizationMode mode = LocalizationMode::oracle;

  OptimizerConfig optimizer;
  bool learning_rate_set = false;  // else 1e-2 for pretraining, 1e-3 for episodic stages

  std::vector<int> widths{32, 64, 128, 256};
  std::vector<int> rpn_widths{32, 64, 128};
  int norm_groups = 8;
  int input_channels = 4;  // stage A

  SplitPolicy split = SplitPolicy::ratio_80_10_10;
  std::uint64_t split_seed = 0;
  std::vector<std::int64_t> test_classes;

  int min_images_per_class = 200;
  double min_area_fraction = 0.002;

  bool augment = true;
  AugmentPolicy augment_policy;

  int rpn_queries = 2;
  bool rpn_head_norm = true;
  bool rpn_loss_at_feature_resolution = false;
  std::optional<float> binarize_threshold;

  double learning_rate_for(bool pretraining) const {
    return learning_rate_set ? optimizer.learning_rate : (pretraining ? 1e-2 : 1e-3);
  }
  std::vector<std::uint64_t> seeds_for_eval() const {
    return eval_seeds.empty() ? std::vector<std::uint64_t>{seed} : eval_seeds;
  }
};

/// Applies one setting; throws ConfigError for unknown keys or bad values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

std::filesystem::path resolve_data_path(const std::filesystem::path& p);

void validate(const RunConfig& config);

}  // namespace busyshot
