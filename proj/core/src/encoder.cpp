#include "busyshot/encoder.hpp"

namespace busyshot {

FeatureMap encode_feature_map(const FeatureMapEncoder<float>& encoder, const Image& image) {
  const Image* batch[] = {&image};
  return feature_map_of(encoder.forward(encoder.assemble(batch)), 0);
}

std::vector<float> encode_embedding(const EmbeddingEncoder<float>& encoder, const Image& image,
                                    const SoftMask* mask) {
  const Image* images[] = {&image};
  const SoftMask* masks[] = {mask};
  std::span<const SoftMask* const> mask_span;
  if (mask != nullptr) {
    mask_span = masks;
  } else if (encoder.input_channels() == 4) {
    throw ConfigError("4-channel encoder requires a mask");
  }
  Tensor<float> out = encoder.forward(encoder.assemble(images, mask_span));
  return {out.data.begin(), out.data.end()};
}

}  // namespace busyshot
