#include "busyshot/rpn.hpp"

namespace busyshot {

double mask_iou(const SoftMask& predicted, const SoftMask& truth, float threshold) {
  if (predicted.height != truth.height || predicted.width != truth.width) {
    throw ShapeError("IoU of masks with different dims");
  }
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    const bool a = predicted.values[i] >= threshold;
    const bool b = truth.values[i] >= threshold;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<float> prototype_from_features(std::span<const FeatureMap> support_features,
                                           std::span<const SoftMask* const> support_masks,
                                           int factor) {
  if (support_features.size() != support_masks.size()) {
    throw ShapeError("support features and masks differ in count");
  }
  std::vector<SoftMask> low;
  low.reserve(support_masks.size());
  for (const SoftMask* m : support_masks) {
    if (!(m->mass() > 0.0)) throw EmptyMaskError("support annotation mask is empty");
    low.push_back(downsample_mask(*m, factor));
  }
  return class_prototype(support_features, std::span<const SoftMask>(low));
}

SoftMask propose_from_features(std::span<const float> prototype, const FeatureMap& query_features,
                               int factor, int height, int width, const ProposalOptions& options) {
  const SimilarityMap sim = similarity_map(prototype, query_features);
  SoftMask proposal = proposal_from_similarity(sim, factor, height, width);
  if (options.binarize_threshold) proposal = binarize(proposal, *options.binarize_threshold);
  return proposal;
}

SoftMask propose_region(const FeatureMapEncoder<float>& encoder,
                        std::span<const Image* const> support_images,
                        std::span<const SoftMask* const> support_masks, const Image& query_image,
                        const ProposalOptions& options) {
  if (support_images.empty()) throw ConfigError("region proposal needs at least one support image");
  if (support_images.size() != support_masks.size()) {
    throw ShapeError("support images and masks differ in count");
  }
  for (std::size_t i = 0; i < support_images.size(); ++i) {
    if (support_masks[i]->height != support_images[i]->height ||
        support_masks[i]->width != support_images[i]->width) {
      throw ShapeError("support mask does not match its image");
    }
  }
  std::vector<const Image*> batch(support_images.begin(), support_images.end());
  batch.push_back(&query_image);
  const Tensor<float> feats = encoder.forward(encoder.assemble(batch));
  std::vector<FeatureMap> support;
  for (std::size_t i = 0; i < support_images.size(); ++i) {
    support.push_back(feature_map_of(feats, static_cast<int>(i)));
  }
  const int factor = encoder.downsample_factor();
  const auto proto = prototype_from_features(support, support_masks, factor);
  return propose_from_features(proto, feature_map_of(feats, static_cast<int>(support.size())), factor,
                               query_image.height, query_image.width, options);
}

}  // namespace busyshot
