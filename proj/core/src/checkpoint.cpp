#include "busyshot/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace busyshot {

namespace {

constexpr std::array<char, 8> kMagic{'B', 'S', 'C', 'K', 'P', 'T', '\0', '\1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

template <typename U>
void write_pod(std::ostream& out, U value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U read_pod(std::istream& in) {
  U value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(U));
  if (!in) throw DataError("truncated checkpoint");
  return value;
}

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json header;
  header["kind"] = checkpoint.kind;
  header["config"] = checkpoint.config;
  header["metadata"] = checkpoint.metadata;
  header["arrays"] = nlohmann::json::array();
  for (const auto& a : checkpoint.arrays) {
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"count", a.values.size()}});
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic.data(), kMagic.size());
  write_pod<std::uint32_t>(out, Checkpoint::kVersion);
  write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : checkpoint.arrays) {
    out.write(reinterpret_cast<const char*>(a.values.data()),
              static_cast<std::streamsize>(a.values.size() * sizeof(float)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw DataError(path.string() + " is not a checkpoint");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != Checkpoint::kVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = read_pod<std::uint64_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw DataError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.kind = header.at("kind").get<std::string>();
  ckpt.config = header.at("config");
  ckpt.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& entry : header.at("arrays")) {
    NamedArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<std::vector<int>>();
    a.values.resize(entry.at("count").get<std::size_t>());
    in.read(reinterpret_cast<char*>(a.values.data()),
            static_cast<std::streamsize>(a.values.size() * sizeof(float)));
    if (!in) throw DataError("truncated checkpoint payload at " + a.name);
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

nlohmann::json backbone_config_to_json(const BackboneConfig& config) {
  return {{"input_channels", config.input_channels},
          {"widths", config.widths},
          {"norm_groups", config.norm_groups},
          {"head_norm", config.head_norm},
          {"channel_mean", config.stats.mean},
          {"channel_std", config.stats.stddev}};
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.input_channels = j.at("input_channels").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.norm_groups = j.at("norm_groups").get<int>();
  c.head_norm = j.value("head_norm", true);
  c.stats.mean = j.at("channel_mean").get<std::array<float, 3>>();
  c.stats.stddev = j.at("channel_std").get<std::array<float, 3>>();
  return c;
}

void append_parameters(Checkpoint& ckpt, Backbone<float>& backbone) {
  for (auto* p : backbone.parameters()) ckpt.arrays.push_back({p->name, p->shape, p->value});
}

void restore_parameters(const Checkpoint& ckpt, Backbone<float>& backbone) {
  for (auto* p : backbone.parameters()) {
    const NamedArray* a = ckpt.find(p->name);
    if (a == nullptr) throw DataError("checkpoint is missing parameter " + p->name);
    if (a->shape != p->shape || a->values.size() != p->value.size()) {
      throw ShapeError("checkpoint parameter " + p->name + " has the wrong shape");
    }
    p->value = a->values;
  }
}

Checkpoint make_checkpoint(FeatureMapEncoder<float>& encoder) {
  Checkpoint ckpt;
  ckpt.kind = "feature_map_encoder";
  ckpt.config = backbone_config_to_json(encoder.backbone().config());
  append_parameters(ckpt, encoder.backbone());
  return ckpt;
}

Checkpoint make_checkpoint(EmbeddingEncoder<float>& encoder) {
  Checkpoint ckpt;
  ckpt.kind = "embedding_encoder";
  ckpt.config = backbone_config_to_json(encoder.backbone().config());
  append_parameters(ckpt, encoder.backbone());
  return ckpt;
}

FeatureMapEncoder<float> feature_map_encoder_from(const Checkpoint& ckpt) {
  if (ckpt.kind != "feature_map_encoder") {
    throw DataError("expected a feature_map_encoder checkpoint, got " + ckpt.kind);
  }
  FeatureMapEncoder<float> enc(backbone_config_from_json(ckpt.config), 0);
  restore_parameters(ckpt, enc.backbone());
  return enc;
}

EmbeddingEncoder<float> embedding_encoder_from(const Checkpoint& ckpt) {
  if (ckpt.kind != "embedding_encoder") {
    throw DataError("expected an embedding_encoder checkpoint, got " + ckpt.kind);
  }
  EmbeddingEncoder<float> enc(backbone_config_from_json(ckpt.config), 0);
  restore_parameters(ckpt, enc.backbone());
  return enc;
}

}  // namespace busyshot
