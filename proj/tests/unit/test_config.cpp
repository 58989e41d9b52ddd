#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "busyshot/config.hpp"
#include "busyshot/errors.hpp"

using namespace busyshot;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& text) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Config, LoadsKeysCommentsAndWhitespace) {
  const auto p = write_temp("busyshot_cfg_ok.cfg",
                            "# run\n"
                            "stage = eval\n"
                            "  ways=5   # trailing comment\n"
                            "shots = 3\n"
                            "\n"
                            "eval_seeds = 1, 2,3\n"
                            "mode = propnet\n"
                            "split = 60-20-20\n"
                            "augment = off\n"
                            "rpn_head_norm = false\n"
                            "binarize_threshold = 0.4\n"
                            "lr = 0.05\n");
  const RunConfig c = load_run_config(p);
  EXPECT_EQ(c.stage, "eval");
  EXPECT_EQ(c.episode.ways, 5);
  EXPECT_EQ(c.episode.shots, 3);
  EXPECT_EQ(c.seeds_for_eval(), (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(c.mode, LocalizationMode::propnet);
  EXPECT_EQ(c.split, SplitPolicy::ratio_60_20_20);
  EXPECT_FALSE(c.augment);
  EXPECT_FALSE(c.rpn_head_norm);
  ASSERT_TRUE(c.binarize_threshold.has_value());
  EXPECT_FLOAT_EQ(*c.binarize_threshold, 0.4f);
  EXPECT_DOUBLE_EQ(c.learning_rate_for(true), 0.05);
  EXPECT_DOUBLE_EQ(c.learning_rate_for(false), 0.05);
}

TEST(Config, DefaultLearningRatesDependOnStage) {
  const RunConfig c;
  EXPECT_DOUBLE_EQ(c.learning_rate_for(true), 1e-2);
  EXPECT_DOUBLE_EQ(c.learning_rate_for(false), 1e-3);
  EXPECT_EQ(c.seeds_for_eval(), (std::vector<std::uint64_t>{0}));
}

TEST(Config, UnknownKeysAndBadValuesAreErrors) {
  RunConfig c;
  EXPECT_THROW(apply_setting(c, "wayz", "5"), ConfigError);
  EXPECT_THROW(apply_setting(c, "ways", "five"), ConfigError);
  EXPECT_THROW(apply_setting(c, "ways", "5x"), ConfigError);
  EXPECT_THROW(apply_setting(c, "augment", "maybe"), ConfigError);
  EXPECT_THROW(apply_setting(c, "mode", "laser"), ConfigError);
  EXPECT_THROW(apply_setting(c, "split", "50-25-25"), ConfigError);
  EXPECT_THROW(load_run_config(write_temp("busyshot_cfg_bad.cfg", "ways 5\n")), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/busyshot.cfg"), ConfigError);
}

TEST(Config, ValidateRejectsInconsistentValues) {
  RunConfig c;
  validate(c);
  c.episode.ways = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.input_channels = 2;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.widths.clear();
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Config, ModeNamesRoundTrip) {
  for (auto m : {LocalizationMode::none, LocalizationMode::support, LocalizationMode::oracle,
                 LocalizationMode::propnet}) {
    EXPECT_EQ(parse_mode(to_string(m)), m);
  }
}

TEST(Config, DataRootPrefixesRelativeManifests) {
  ::setenv("BUSYSHOT_DATA_ROOT", "/data", 1);
  EXPECT_EQ(resolve_data_path("a/manifest.json"), std::filesystem::path("/data/a/manifest.json"));
  EXPECT_EQ(resolve_data_path("/abs/m.json"), std::filesystem::path("/abs/m.json"));
  ::unsetenv("BUSYSHOT_DATA_ROOT");
  EXPECT_EQ(resolve_data_path("a/manifest.json"), std::filesystem::path("a/manifest.json"));
}
