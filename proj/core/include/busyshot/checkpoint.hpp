#pragma once

// Checkpoint container, version 1, little-endian:
//
//   bytes 0..7   magic "BSCKPT\0\1"
//   u32          format version (1)
//   u64          header length H in bytes
//   H bytes      UTF-8 JSON header:
//                  { "kind": "...", "config": {...}, "metadata": {...},
//                    "arrays": [ {"name", "shape": [..], "count"} ... ] }
//   payload      float32 values of each array, in header order
//
// "config" holds the architecture (BackboneConfig fields) so a checkpoint can
// be rebuilt without any other input.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "busyshot/encoder.hpp"

namespace busyshot {

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
  bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;  // "feature_map_encoder" | "embedding_encoder"
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json backbone_config_to_json(const BackboneConfig& config);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);

void append_parameters(Checkpoint& ckpt, Backbone<float>& backbone);
/// Fills every backbone parameter from the arrays with matching names.
void restore_parameters(const Checkpoint& ckpt, Backbone<float>& backbone);

Checkpoint make_checkpoint(FeatureMapEncoder<float>& encoder);
Checkpoint make_checkpoint(EmbeddingEncoder<float>& encoder);
FeatureMapEncoder<float> feature_map_encoder_from(const Checkpoint& ckpt);
EmbeddingEncoder<float> embedding_encoder_from(const Checkpoint& ckpt);

}  // namespace busyshot
