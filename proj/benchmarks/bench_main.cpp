#include <benchmark/benchmark.h>

#include <random>

#include "busyshot/episodic.hpp"
#include "busyshot/lovasz.hpp"
#include "busyshot/protonet.hpp"
#include "busyshot/rpn.hpp"
#include "busyshot/synth.hpp"

using namespace busyshot;

namespace {

Image noise(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(3, h, w);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

BackboneConfig narrow_rpn() {
  BackboneConfig c = FeatureMapEncoder<float>::default_config();
  c.widths = {16, 32, 64};
  return c;
}

void BM_FeatureMapForward(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  const FeatureMapEncoder<float> enc(narrow_rpn(), 1);
  const Image img = noise(size, size, 2);
  for (auto _ : state) benchmark::DoNotOptimize(encode_feature_map(enc, img));
}
BENCHMARK(BM_FeatureMapForward)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_EmbeddingForward(benchmark::State& state) {
  BackboneConfig c;
  c.input_channels = 4;
  c.widths = {16, 32, 64, 128};
  const EmbeddingEncoder<float> enc(c, 3);
  const Image img = noise(64, 64, 4);
  const SoftMask m = SoftMask::ones(64, 64);
  for (auto _ : state) benchmark::DoNotOptimize(encode_embedding(enc, img, &m));
}
BENCHMARK(BM_EmbeddingForward)->Unit(benchmark::kMillisecond);

void BM_ProposalFromFeatures(benchmark::State& state) {
  const FeatureMapEncoder<float> enc(narrow_rpn(), 5);
  std::vector<FeatureMap> support;
  std::vector<SoftMask> masks;
  for (int i = 0; i < 5; ++i) {
    support.push_back(encode_feature_map(enc, noise(64, 64, 10 + i)));
    masks.push_back(SoftMask::ones(64, 64));
  }
  std::vector<const SoftMask*> mp;
  for (const auto& m : masks) mp.push_back(&m);
  const FeatureMap query = encode_feature_map(enc, noise(64, 64, 20));
  for (auto _ : state) {
    const auto proto = prototype_from_features(support, mp, enc.downsample_factor());
    benchmark::DoNotOptimize(propose_from_features(proto, query, enc.downsample_factor(), 64, 64, {}));
  }
}
BENCHMARK(BM_ProposalFromFeatures)->Unit(benchmark::kMicrosecond);

void BM_LovaszWithGrad(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> p(n);
  std::vector<std::uint8_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = u(rng);
    y[i] = u(rng) < 0.3f;
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(lovasz_loss_with_grad(std::span<const float>(p), std::span<const std::uint8_t>(y)));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_LovaszWithGrad)->RangeMultiplier(4)->Range(1 << 10, 1 << 16)->Complexity(benchmark::oNLogN);

void BM_ProtoNetEpisodeLoss(benchmark::State& state) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> d(0.0, 1.0);
  Matrix<double> support(25, 128), query(25, 128);
  for (Eigen::Index i = 0; i < support.size(); ++i) support.data()[i] = d(rng);
  for (Eigen::Index i = 0; i < query.size(); ++i) query.data()[i] = d(rng);
  std::vector<int> labels(25);
  for (int j = 0; j < 25; ++j) labels[static_cast<std::size_t>(j)] = j % 5;
  for (auto _ : state) {
    benchmark::DoNotOptimize(episode_loss(support, 5, 5, query, std::span<const int>(labels), false));
  }
}
BENCHMARK(BM_ProtoNetEpisodeLoss)->Unit(benchmark::kMicrosecond);

void BM_EpisodeSampling(benchmark::State& state) {
  SceneSpec spec;
  spec.height = spec.width = 32;
  spec.num_classes = 20;
  auto synth = generate_synthetic_corpus(spec, 60, 8);
  FilterConfig filter;
  filter.min_images_per_class = 0;
  const Corpus corpus = build_corpus(filter_dataset(synth.dataset, filter), std::move(synth.pixels));
  SampleSplit all;
  all.classes = corpus.class_ids();
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) all.samples.push_back(i);
  const EpisodeSampler sampler(corpus, all);
  const EpisodeConfig cfg{5, 5, 5, 9};
  std::uint64_t index = 0;
  for (auto _ : state) benchmark::DoNotOptimize(sampler.sample(cfg, index++));
}
BENCHMARK(BM_EpisodeSampling)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
