#pragma once

// Two-stage training and the localization-mode evaluations.
//
//   train_rpn                 1-way episodes, Lovász loss on the query proposal
//   pretrain_classifier       stage A: softmax over training classes
//   train_fewshot_classifier  stage B: episodic ProtoNet training
//   finetune_on_proposals     last block only, query masks from the frozen RPN
//   evaluate                  none | support | oracle | propnet

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "busyshot/checkpoint.hpp"
#include "busyshot/config.hpp"
#include "busyshot/dataset.hpp"
#include "busyshot/encoder.hpp"
#include "busyshot/episodic.hpp"

namespace busyshot {

/// Line-delimited JSON metrics; a default-constructed log discards records.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::filesystem::path& path);
  void write(const nlohmann::json& record);

 private:
  std::ofstream out_;
};

struct PreparedData {
  Corpus corpus;
  DataSplits splits;
};

/// Manifest -> filter -> corpus -> class splits -> test-image removal.
PreparedData prepare_data(const RunConfig& config);
PreparedData prepare_data(const RunConfig& config, Corpus corpus);

struct RpnTraining {
  FeatureMapEncoder<float> encoder;
  double best_val_iou = 0.0;
  int best_epoch = -1;
  std::vector<double> epoch_loss;
};

RpnTraining train_rpn(const RunConfig& config, const Corpus& corpus, const DataSplits& splits,
                      MetricsLog* log = nullptr);

struct RpnReport {
  double mean_iou = 0.0;
  double foreground_above_background = 0.0;  // share of episodes
  int episodes = 0;
};

/// 1-way episodes with one query each; IoU after thresholding at 0.5.
RpnReport evaluate_rpn(const FeatureMapEncoder<float>& rpn, const Corpus& corpus, const SampleSplit& split,
                       int episodes, int shots, std::uint64_t seed);

struct ClassifierTraining {
  EmbeddingEncoder<float> encoder;
  double best_val_accuracy = 0.0;
  int best_epoch = -1;  // -1: the starting weights were never beaten
  std::vector<double> epoch_loss;
};

/// Stage A. `input_channels` 4 feeds the ground-truth mask, 3 feeds RGB only.
ClassifierTraining pretrain_classifier(const RunConfig& config, const Corpus& corpus, const DataSplits& splits,
                                       int input_channels, MetricsLog* log = nullptr);

/// Stage B, starting from `init`, with masks as dictated by `mode`
/// (none needs a 3-channel encoder; propnet is reserved for fine-tuning).
ClassifierTraining train_fewshot_classifier(const RunConfig& config, const Corpus& corpus,
                                            const DataSplits& splits, EmbeddingEncoder<float> init,
                                            LocalizationMode mode, MetricsLog* log = nullptr);

/// Updates only the last convolutional block; the RPN is read-only. Keeps
/// the weights with the best validation propnet accuracy, the starting
/// weights included.
ClassifierTraining finetune_on_proposals(const RunConfig& config, const Corpus& corpus, const DataSplits& splits,
                                         const FeatureMapEncoder<float>& rpn, EmbeddingEncoder<float> classifier,
                                         MetricsLog* log = nullptr);

struct SeedResult {
  std::uint64_t seed = 0;
  int episodes = 0;
  long correct = 0;
  long total = 0;
  double accuracy = 0.0;
};

struct EvalReport {
  LocalizationMode mode = LocalizationMode::oracle;
  double accuracy = 0.0;
  int episodes = 0;
  int queries_per_episode = 0;
  long correct = 0;
  long total = 0;
  double half_width = 0.0;  // 95% normal approximation
  std::vector<SeedResult> per_seed;
};

double confidence_half_width(double accuracy, long predictions);
nlohmann::json to_json(const EvalReport& report);

/// Replaces the RPN proposal for (episode, class position, query sample).
using ProposalHook = std::function<SoftMask(const Episode&, int, std::size_t)>;

struct EvalOptions {
  LocalizationMode mode = LocalizationMode::oracle;
  EpisodeConfig episode;
  int episodes = 1000;
  std::vector<std::uint64_t> seeds{0};
  std::optional<float> binarize_threshold;
  ProposalHook proposal_hook;
};

/// The validation episodes used for checkpoint selection during episodic training.
EvalOptions validation_options(const RunConfig& config, LocalizationMode mode);

/// Accuracy over all query predictions. Throws ConfigError when the
/// classifier's channel count does not suit the mode or propnet lacks an RPN.
EvalReport evaluate(const EvalOptions& options, const Corpus& corpus, const SampleSplit& split,
                    const EmbeddingEncoder<float>& classifier, const FeatureMapEncoder<float>* rpn = nullptr);

// File-level stage runners used by the command line tool.
void run_train_rpn(const RunConfig& config);
void run_pretrain_classifier(const RunConfig& config);
void run_train_fewshot(const RunConfig& config);
void run_finetune(const RunConfig& config);
EvalReport run_evaluate(const RunConfig& config);

}  // namespace busyshot
