#include "busyshot/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "busyshot/errors.hpp"

namespace busyshot {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) throw ConfigError("invalid value '" + v + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("invalid boolean '" + v + "' for " + key);
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<T>(key, item));
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"stage", [](RunConfig& c, auto&, auto& v) { c.stage = v; }},
      {"manifest", [](RunConfig& c, auto&, auto& v) { c.manifest = v; }},
      {"output", [](RunConfig& c, auto&, auto& v) { c.output = v; }},
      {"metrics", [](RunConfig& c, auto&, auto& v) { c.metrics = v; }},
      {"split_dir", [](RunConfig& c, auto&, auto& v) { c.split_dir = v; }},
      {"rpn_checkpoint", [](RunConfig& c, auto&, auto& v) { c.rpn_checkpoint = v; }},
      {"classifier_checkpoint", [](RunConfig& c, auto&, auto& v) { c.classifier_checkpoint = v; }},
      {"ways", [](RunConfig& c, auto& k, auto& v) { c.episode.ways = parse_number<int>(k, v); }},
      {"shots", [](RunConfig& c, auto& k, auto& v) { c.episode.shots = parse_number<int>(k, v); }},
      {"queries", [](RunConfig& c, auto& k, auto& v) { c.episode.queries_per_episode = parse_number<int>(k, v); }},
      {"seed",
       [](RunConfig& c, auto& k, auto& v) {
         c.seed = parse_number<std::uint64_t>(k, v);
         c.episode.seed = c.seed;
         c.augment_policy.seed = c.seed;
       }},
      {"eval_seeds", [](RunConfig& c, auto& k, auto& v) { c.eval_seeds = parse_list<std::uint64_t>(k, v); }},
      {"epochs", [](RunConfig& c, auto& k, auto& v) { c.epochs = parse_number<int>(k, v); }},
      {"episodes_per_epoch", [](RunConfig& c, auto& k, auto& v) { c.episodes_per_epoch = parse_number<int>(k, v); }},
      {"val_episodes", [](RunConfig& c, auto& k, auto& v) { c.val_episodes = parse_number<int>(k, v); }},
      {"eval_episodes", [](RunConfig& c, auto& k, auto& v) { c.eval_episodes = parse_number<int>(k, v); }},
      {"batch_size", [](RunConfig& c, auto& k, auto& v) { c.batch_size = parse_number<int>(k, v); }},
      {"mode", [](RunConfig& c, auto&, auto& v) { c.mode = parse_mode(v); }},
      {"optimizer", [](RunConfig& c, auto&, auto& v) { c.optimizer.kind = v; }},
      {"lr",
       [](RunConfig& c, auto& k, auto& v) {
         c.optimizer.learning_rate = parse_number<double>(k, v);
         c.learning_rate_set = true;
       }},
      {"momentum", [](RunConfig& c, auto& k, auto& v) { c.optimizer.momentum = parse_number<double>(k, v); }},
      {"weight_decay", [](RunConfig& c, auto& k, auto& v) { c.optimizer.weight_decay = parse_number<double>(k, v); }},
      {"lr_step_every", [](RunConfig& c, auto& k, auto& v) { c.optimizer.step_every = parse_number<int>(k, v); }},
      {"lr_gamma", [](RunConfig& c, auto& k, auto& v) { c.optimizer.step_gamma = parse_number<double>(k, v); }},
      {"grad_clip", [](RunConfig& c, auto& k, auto& v) { c.optimizer.grad_clip = parse_number<double>(k, v); }},
      {"widths", [](RunConfig& c, auto& k, auto& v) { c.widths = parse_list<int>(k, v); }},
      {"rpn_widths", [](RunConfig& c, auto& k, auto& v) { c.rpn_widths = parse_list<int>(k, v); }},
      {"norm_groups", [](RunConfig& c, auto& k, auto& v) { c.norm_groups = parse_number<int>(k, v); }},
      {"input_channels", [](RunConfig& c, auto& k, auto& v) { c.input_channels = parse_number<int>(k, v); }},
      {"split", [](RunConfig& c, auto&, auto& v) { c.split = parse_split_policy(v); }},
      {"split_seed", [](RunConfig& c, auto& k, auto& v) { c.split_seed = parse_number<std::uint64_t>(k, v); }},
      {"test_classes", [](RunConfig& c, auto& k, auto& v) { c.test_classes = parse_list<std::int64_t>(k, v); }},
      {"min_images_per_class",
       [](RunConfig& c, auto& k, auto& v) { c.min_images_per_class = parse_number<int>(k, v); }},
      {"min_area_fraction", [](RunConfig& c, auto& k, auto& v) { c.min_area_fraction = parse_number<double>(k, v); }},
      {"augment", [](RunConfig& c, auto& k, auto& v) { c.augment = parse_bool(k, v); }},
      {"flip_prob",
       [](RunConfig& c, auto& k, auto& v) { c.augment_policy.horizontal_flip_prob = parse_number<double>(k, v); }},
      {"rotation_deg", [](RunConfig& c, auto& k, auto& v) { c.augment_policy.rotation_deg = parse_number<double>(k, v); }},
      {"translation", [](RunConfig& c, auto& k, auto& v) { c.augment_policy.translation = parse_number<double>(k, v); }},
      {"scale_min", [](RunConfig& c, auto& k, auto& v) { c.augment_policy.scale_min = parse_number<double>(k, v); }},
      {"scale_max", [](RunConfig& c, auto& k, auto& v) { c.augment_policy.scale_max = parse_number<double>(k, v); }},
      {"rpn_head_norm", [](RunConfig& c, auto& k, auto& v) { c.rpn_head_norm = parse_bool(k, v); }},
      {"rpn_queries", [](RunConfig& c, auto& k, auto& v) { c.rpn_queries = parse_number<int>(k, v); }},
      {"rpn_loss_resolution",
       [](RunConfig& c, auto& k, auto& v) {
         if (v != "image" && v != "feature") throw ConfigError(k + " must be image or feature");
         c.rpn_loss_at_feature_resolution = v == "feature";
       }},
      {"binarize_threshold",
       [](RunConfig& c, auto& k, auto& v) {
         if (v.empty() || v == "none") {
           c.binarize_threshold.reset();
         } else {
           c.binarize_threshold = parse_number<float>(k, v);
         }
       }},
  };
  return table;
}

}  // namespace

LocalizationMode parse_mode(const std::string& s) {
  if (s == "none") return LocalizationMode::none;
  if (s == "support") return LocalizationMode::support;
  if (s == "oracle") return LocalizationMode::oracle;
  if (s == "propnet") return LocalizationMode::propnet;
  throw ConfigError("unknown localization mode '" + s + "' (none|support|oracle|propnet)");
}

std::string to_string(LocalizationMode m) {
  switch (m) {
    case LocalizationMode::none: return "none";
    case LocalizationMode::support: return "support";
    case LocalizationMode::oracle: return "oracle";
    case LocalizationMode::propnet: return "propnet";
  }
  return "?";
}

SplitPolicy parse_split_policy(const std::string& s) {
  if (s == "80-10-10") return SplitPolicy::ratio_80_10_10;
  if (s == "60-20-20") return SplitPolicy::ratio_60_20_20;
  if (s == "provided") return SplitPolicy::provided_test;
  throw ConfigError("unknown split policy '" + s + "' (80-10-10|60-20-20|provided)");
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  const auto& table = setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(config, key, value);
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

std::filesystem::path resolve_data_path(const std::filesystem::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  if (const char* root = std::getenv("BUSYSHOT_DATA_ROOT"); root != nullptr && *root != '\0') {
    return std::filesystem::path(root) / p;
  }
  return p;
}

void validate(const RunConfig& c) {
  if (c.episode.ways < 1 || c.episode.shots < 1 || c.episode.queries_per_episode < 1) {
    throw ConfigError("ways, shots and queries must be positive");
  }
  if (c.epochs < 0 || c.episodes_per_epoch < 1 || c.val_episodes < 0 || c.eval_episodes < 1) {
    throw ConfigError("epoch and episode counts must be positive");
  }
  if (c.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (c.input_channels != 3 && c.input_channels != 4) throw ConfigError("input_channels must be 3 or 4");
  if (c.widths.empty() || c.rpn_widths.empty()) throw ConfigError("widths must not be empty");
  if (c.rpn_queries < 1) throw ConfigError("rpn_queries must be positive");
  validate(c.optimizer);
  validate(c.augment_policy);
}

}  // namespace busyshot
