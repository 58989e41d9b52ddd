// busyshot command line: training stages, evaluation, synthetic data, stats.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "busyshot/config.hpp"
#include "busyshot/dataset.hpp"
#include "busyshot/episodic.hpp"
#include "busyshot/errors.hpp"
#include "busyshot/pipeline.hpp"
#include "busyshot/synth.hpp"

namespace {

using busyshot::RunConfig;

// Flags shared by the training and evaluation subcommands; each maps onto a config key.
struct StageFlags {
  std::string config_file;
  std::vector<std::string> settings;
  std::map<std::string, std::string> values;
};

void add_stage_flags(CLI::App* cmd, StageFlags& f) {
  cmd->add_option("--config", f.config_file, "Run config file (key = value lines)")->check(CLI::ExistingFile);
  cmd->add_option("--set", f.settings, "Override a config key, KEY=VALUE (repeatable)");
  const std::vector<std::pair<std::string, std::string>> flags = {
      {"--manifest", "manifest"},
      {"--out", "output"},
      {"--metrics", "metrics"},
      {"--split-dir", "split_dir"},
      {"--rpn", "rpn_checkpoint"},
      {"--classifier", "classifier_checkpoint"},
      {"--mode", "mode"},
      {"--seed", "seed"},
      {"--seeds", "eval_seeds"},
      {"--epochs", "epochs"},
      {"--episodes-per-epoch", "episodes_per_epoch"},
      {"--val-episodes", "val_episodes"},
      {"--episodes", "eval_episodes"},
      {"--ways", "ways"},
      {"--shots", "shots"},
      {"--queries", "queries"},
      {"--lr", "lr"},
      {"--optimizer", "optimizer"},
      {"--channels", "input_channels"},
      {"--split", "split"},
  };
  for (const auto& [flag, key] : flags) {
    cmd->add_option_function<std::string>(flag, [&f, key = key](const std::string& v) { f.values[key] = v; },
                                          "Sets config key '" + key + "'");
  }
}

RunConfig build_config(const std::string& stage, const StageFlags& f) {
  RunConfig cfg;
  if (!f.config_file.empty()) cfg = busyshot::load_run_config(f.config_file);
  cfg.stage = stage;
  for (const auto& s : f.settings) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw busyshot::ConfigError("--set expects KEY=VALUE, got " + s);
    busyshot::apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [key, value] : f.values) busyshot::apply_setting(cfg, key, value);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot region proposal and early-fusion ProtoNet classification"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  StageFlags rpn_flags, pre_flags, fs_flags, ft_flags, eval_flags;
  auto* train_rpn = app.add_subcommand("train-rpn", "Train the region proposal network");
  add_stage_flags(train_rpn, rpn_flags);
  auto* pretrain = app.add_subcommand("pretrain-cls", "Stage A: standard classification pretraining");
  add_stage_flags(pretrain, pre_flags);
  auto* fewshot = app.add_subcommand("train-fewshot", "Stage B: episodic training with ground-truth masks");
  add_stage_flags(fewshot, fs_flags);
  auto* finetune = app.add_subcommand("finetune", "Fine-tune the last classifier block on RPN proposals");
  add_stage_flags(finetune, ft_flags);
  auto* eval = app.add_subcommand("eval", "Evaluate a classifier in one localization mode");
  add_stage_flags(eval, eval_flags);

  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic busy-scene corpus");
  busyshot::SceneSpec spec;
  int scenes_per_class = 60;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--classes", spec.num_classes, "Number of shape x colour classes (<= 64)");
  gen->add_option("--scenes-per-class", scenes_per_class, "Target images per class");
  int canvas = spec.height;
  gen->add_option("--size", canvas, "Canvas side in pixels");
  gen->add_option("--min-objects", spec.min_objects);
  gen->add_option("--max-objects", spec.max_objects);
  gen->add_option("--min-area", spec.min_area);
  gen->add_option("--max-area", spec.max_area);
  gen->add_option("--seed", gen_seed);
  std::string group_split;
  std::uint64_t group_seed = 0;
  gen->add_option("--split-groups", group_split,
                  "Compose each scene from one class split group (80-10-10|60-20-20), matching split_seed");
  gen->add_option("--split-seed", group_seed, "Seed of the class split used by --split-groups");
  gen->add_option("--out", gen_out, "Output directory")->required();

  auto* stats = app.add_subcommand("stats", "Summary statistics of a filtered manifest");
  std::string stats_manifest;
  busyshot::FilterConfig filter;
  stats->add_option("--manifest", stats_manifest)->required();
  stats->add_option("--min-images", filter.min_images_per_class, "Class image-count threshold (0 disables)");
  stats->add_option("--min-area", filter.min_area_fraction, "Annotation area threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  spdlog::set_default_logger(spdlog::stderr_color_mt("busyshot"));

  try {
    if (*train_rpn) {
      busyshot::run_train_rpn(build_config("train-rpn", rpn_flags));
    } else if (*pretrain) {
      busyshot::run_pretrain_classifier(build_config("pretrain-cls", pre_flags));
    } else if (*fewshot) {
      busyshot::run_train_fewshot(build_config("train-fewshot", fs_flags));
    } else if (*finetune) {
      busyshot::run_finetune(build_config("finetune", ft_flags));
    } else if (*eval) {
      const auto report = busyshot::run_evaluate(build_config("eval", eval_flags));
      std::cout << busyshot::to_json(report).dump(2) << '\n';
    } else if (*gen) {
      spec.height = spec.width = canvas;
      std::vector<std::vector<int>> groups;
      if (!group_split.empty()) {
        std::vector<std::int64_t> ids(static_cast<std::size_t>(spec.num_classes));
        for (int c = 0; c < spec.num_classes; ++c) ids[static_cast<std::size_t>(c)] = c;
        const auto cs = busyshot::make_class_splits(ids, busyshot::parse_split_policy(group_split), group_seed);
        for (const auto* part : {&cs.train, &cs.val, &cs.test}) groups.emplace_back(part->begin(), part->end());
      }
      const auto corpus = busyshot::generate_synthetic_corpus(spec, scenes_per_class, gen_seed, groups);
      busyshot::write_synthetic_corpus(corpus, gen_out);
      spdlog::info("wrote {} images, {} annotations to {}", corpus.dataset.images.size(),
                   corpus.dataset.annotations.size(), gen_out);
    } else if (*stats) {
      const auto raw = busyshot::load_annotations(stats_manifest);
      const auto filtered = busyshot::filter_dataset(raw, filter);
      std::cout << busyshot::stats_to_json(busyshot::compute_stats(filtered)).dump(2) << '\n';
    }
  } catch (const busyshot::ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
