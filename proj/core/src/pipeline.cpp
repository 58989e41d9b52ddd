#include "busyshot/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "busyshot/augment.hpp"
#include "busyshot/errors.hpp"
#include "busyshot/lovasz.hpp"
#include "busyshot/optim.hpp"
#include "busyshot/protonet.hpp"
#include "busyshot/rng.hpp"
#include "busyshot/rpn.hpp"

namespace busyshot {

namespace {

// Stream salts keep the episode streams of different stages apart.
constexpr std::uint64_t kRpnSalt = 0x52504e;
constexpr std::uint64_t kStageASalt = 0x5354410a;
constexpr std::uint64_t kStageBSalt = 0x5354420b;
constexpr std::uint64_t kFinetuneSalt = 0x46540c;
constexpr std::uint64_t kValSalt = 0x56414c;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<Image> float_images(const Corpus& corpus) {
  std::vector<Image> out;
  out.reserve(corpus.pixels.size());
  for (const auto& p : corpus.pixels) out.push_back(to_image(p));
  for (const auto& im : out) {
    if (im.height != out.front().height || im.width != out.front().width) {
      throw ConfigError("all images must share one resolution; resize them before ingestion");
    }
  }
  return out;
}

struct View {
  Image image;
  SoftMask mask;
};

View make_view(const std::vector<Image>& images, const Corpus& corpus, std::size_t sample, bool augment,
               const AugmentPolicy& policy, std::uint64_t draw) {
  const AnnotatedSample& s = corpus.samples[sample];
  if (!augment) return {images[s.image_index], s.mask};
  auto [img, mask] = augment_pair(images[s.image_index], s.mask, policy, draw);
  return {std::move(img), std::move(mask)};
}

template <typename P>
std::vector<std::vector<float>> snapshot(const std::vector<P*>& params) {
  std::vector<std::vector<float>> out;
  for (auto* p : params) out.push_back(p->value);
  return out;
}

template <typename P>
void restore(const std::vector<P*>& params, const std::vector<std::vector<float>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

void check_finite(double loss, const std::string& stage, int epoch, int step, double grad_norm) {
  if (!std::isfinite(loss) || !std::isfinite(grad_norm)) {
    throw TrainingDiverged(stage + " diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": loss " + std::to_string(loss) + ", gradient norm " +
                           std::to_string(grad_norm));
  }
}

BackboneConfig backbone_for(const RunConfig& cfg, const Corpus& corpus, int channels, bool rpn) {
  BackboneConfig b;
  b.input_channels = channels;
  b.widths = rpn ? cfg.rpn_widths : cfg.widths;
  b.norm_groups = cfg.norm_groups;
  if (rpn) b.head_norm = cfg.rpn_head_norm;
  b.stats = corpus.stats;
  return b;
}

OptimizerConfig optimizer_for(const RunConfig& cfg, bool pretraining) {
  OptimizerConfig o = cfg.optimizer;
  o.learning_rate = cfg.learning_rate_for(pretraining);
  return o;
}

AugmentPolicy policy_for(const RunConfig& cfg, std::uint64_t salt) {
  AugmentPolicy p = cfg.augment_policy;
  p.seed = splitmix64(cfg.seed ^ salt);
  return p;
}

std::uint64_t draw_index(std::uint64_t step, std::uint64_t slot) { return (step << 12) | slot; }

Matrix<float> rows_of(const Tensor<float>& emb, int begin, int count) {
  const int d = emb.c * emb.h * emb.w;
  Matrix<float> m(count, d);
  for (int r = 0; r < count; ++r) {
    auto src = emb.sample(begin + r);
    std::copy(src.begin(), src.end(), m.row(r).data());
  }
  return m;
}

// --- region proposal --------------------------------------------------------

struct RpnStep {
  double loss = 0.0;
  double grad_norm = 0.0;
};

std::vector<std::uint8_t> binary_labels(const SoftMask& m) {
  std::vector<std::uint8_t> y(m.values.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = m.values[i] >= 0.5f ? 1 : 0;
  return y;
}

RpnStep rpn_train_step(FeatureMapEncoder<float>& rpn, Optimizer<float>& opt, const std::vector<View>& support,
                       const std::vector<View>& queries, bool feature_resolution, int epoch) {
  const int shots = static_cast<int>(support.size());
  const int factor = rpn.downsample_factor();
  std::vector<const Image*> batch;
  for (const auto& v : support) batch.push_back(&v.image);
  for (const auto& v : queries) batch.push_back(&v.image);
  const Tensor<float> feats = rpn.forward_train(rpn.assemble(batch));

  std::vector<FeatureMap> shot_maps;
  std::vector<SoftMask> low;
  for (int i = 0; i < shots; ++i) {
    shot_maps.push_back(feature_map_of(feats, i));
    low.push_back(downsample_mask(support[static_cast<std::size_t>(i)].mask, factor));
  }
  const std::vector<float> proto = class_prototype(std::span<const FeatureMap>(shot_maps), std::span<const SoftMask>(low));
  std::vector<float> proto_grad(proto.size(), 0.0f);

  Tensor<float> grad(feats.n, feats.c, feats.h, feats.w);
  const int h = queries.front().image.height;
  const int w = queries.front().image.width;
  const double inv_q = 1.0 / static_cast<double>(queries.size());
  double loss = 0.0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const int idx = shots + static_cast<int>(q);
    const FeatureMap qmap = feature_map_of(feats, idx);
    const SimilarityMap sim = similarity_map(std::span<const float>(proto), qmap);
    std::vector<float> sim_grad(sim.values.size(), 0.0f);
    if (feature_resolution) {
      std::vector<float> p(sim.values.size());
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = (sim.values[i] + 1.0f) * 0.5f;
      const auto y = binary_labels(downsample_mask(queries[q].mask, factor));
      const auto res = lovasz_loss_with_grad(std::span<const float>(p), std::span<const std::uint8_t>(y));
      loss += res.loss * inv_q;
      for (std::size_t i = 0; i < p.size(); ++i) sim_grad[i] = static_cast<float>(0.5 * inv_q * res.grad[i]);
    } else {
      const SoftMask prop = proposal_from_similarity(sim, factor, h, w);
      const auto y = binary_labels(queries[q].mask);
      const auto res = lovasz_loss_with_grad(std::span<const float>(prop.values), std::span<const std::uint8_t>(y));
      loss += res.loss * inv_q;
      SoftMask g(h, w);
      for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = static_cast<float>(inv_q * res.grad[i]);
      const auto low_grad = upsample_bilinear_backward(g, sim.height, sim.width, factor);
      for (std::size_t i = 0; i < sim_grad.size(); ++i) sim_grad[i] = 0.5f * low_grad[i];
    }
    FeatureMap qgrad(qmap.channels, qmap.height, qmap.width);
    similarity_map_backward(std::span<const float>(proto), qmap, sim, std::span<const float>(sim_grad), qgrad,
                            std::span<float>(proto_grad));
    std::copy(qgrad.values.begin(), qgrad.values.end(), grad.sample(idx).begin());
  }
  for (int i = 0; i < shots; ++i) {
    FeatureMap sgrad(feats.c, feats.h, feats.w);
    class_prototype_backward(std::span<const float>(proto_grad), low[static_cast<std::size_t>(i)], shots, sgrad);
    std::copy(sgrad.values.begin(), sgrad.values.end(), grad.sample(i).begin());
  }
  opt.zero_grad();
  rpn.backward(grad);
  const double norm = opt.step(epoch);
  return {loss, norm};
}

// --- classification ----------------------------------------------------------

struct EpisodeInputs {
  std::vector<Image> images;
  std::vector<SoftMask> masks;  // empty for 3-channel encoders
  std::vector<int> labels;
  bool per_class = false;
};

// Proposal masks for every (query, class) pair, computed with a frozen RPN.
std::vector<SoftMask> proposals_for(const FeatureMapEncoder<float>& rpn, const std::vector<View>& support, int ways,
                                    int shots, const std::vector<View>& queries, std::optional<float> threshold) {
  std::vector<const Image*> batch;
  for (const auto& v : support) batch.push_back(&v.image);
  for (const auto& v : queries) batch.push_back(&v.image);
  const Tensor<float> feats = rpn.forward(rpn.assemble(batch));
  const int factor = rpn.downsample_factor();
  std::vector<std::vector<float>> protos;
  for (int k = 0; k < ways; ++k) {
    std::vector<FeatureMap> maps;
    std::vector<const SoftMask*> masks;
    for (int i = 0; i < shots; ++i) {
      const int idx = k * shots + i;
      maps.push_back(feature_map_of(feats, idx));
      masks.push_back(&support[static_cast<std::size_t>(idx)].mask);
    }
    protos.push_back(prototype_from_features(std::span<const FeatureMap>(maps),
                                             std::span<const SoftMask* const>(masks), factor));
  }
  ProposalOptions opts;
  opts.binarize_threshold = threshold;
  std::vector<SoftMask> out;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const FeatureMap qmap = feature_map_of(feats, ways * shots + static_cast<int>(q));
    for (int k = 0; k < ways; ++k) {
      out.push_back(propose_from_features(std::span<const float>(protos[static_cast<std::size_t>(k)]), qmap, factor,
                                          queries[q].image.height, queries[q].image.width, opts));
    }
  }
  return out;
}

EpisodeInputs episode_inputs(const Episode& ep, LocalizationMode mode, const Corpus& corpus,
                             const std::vector<Image>& images, bool augment, const AugmentPolicy& policy,
                             std::uint64_t step, const FeatureMapEncoder<float>* rpn,
                             std::optional<float> threshold) {
  const int ways = static_cast<int>(ep.classes.size());
  const int shots = static_cast<int>(ep.support.front().size());
  std::vector<View> support;
  std::uint64_t slot = 0;
  for (int k = 0; k < ways; ++k) {
    for (int i = 0; i < shots; ++i) {
      support.push_back(make_view(images, corpus, ep.support[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)],
                                  augment, policy, draw_index(step, slot++)));
    }
  }
  std::vector<View> queries;
  for (const auto& q : ep.queries) {
    queries.push_back(make_view(images, corpus, q.sample, augment, policy, draw_index(step, slot++)));
  }
  std::vector<SoftMask> props;
  if (mode == LocalizationMode::propnet) props = proposals_for(*rpn, support, ways, shots, queries, threshold);
  EpisodeInputs in;
  for (const auto& q : ep.queries) in.labels.push_back(q.label);
  for (auto& v : support) {
    in.images.push_back(std::move(v.image));
    if (mode != LocalizationMode::none) in.masks.push_back(std::move(v.mask));
  }
  if (mode == LocalizationMode::propnet) {
    in.per_class = true;
    for (std::size_t q = 0; q < queries.size(); ++q) {
      for (int k = 0; k < ways; ++k) {
        in.images.push_back(queries[q].image);
        in.masks.push_back(props[q * static_cast<std::size_t>(ways) + static_cast<std::size_t>(k)]);
      }
    }
    return in;
  }
  for (auto& v : queries) {
    const int h = v.image.height;
    const int w = v.image.width;
    in.images.push_back(std::move(v.image));
    if (mode == LocalizationMode::support) in.masks.push_back(SoftMask::ones(h, w));
    if (mode == LocalizationMode::oracle) in.masks.push_back(std::move(v.mask));
  }
  return in;
}

struct StepResult {
  double loss = 0.0;
  int correct = 0;
  double grad_norm = 0.0;
};

StepResult classifier_train_step(EmbeddingEncoder<float>& enc, Optimizer<float>& opt, const EpisodeInputs& in,
                                 int ways, int shots, std::size_t first_block, int epoch) {
  std::vector<const Image*> imgs;
  std::vector<const SoftMask*> masks;
  for (const auto& im : in.images) imgs.push_back(&im);
  for (const auto& m : in.masks) masks.push_back(&m);
  const Tensor<float> emb = enc.forward_train(enc.assemble(imgs, masks), first_block);
  const int n_support = ways * shots;
  const Matrix<float> s = rows_of(emb, 0, n_support);
  const Matrix<float> q = rows_of(emb, n_support, emb.n - n_support);
  const auto res = episode_loss<float>(s, ways, shots, q, std::span<const int>(in.labels), in.per_class);
  Tensor<float> grad(emb.n, emb.c, 1, 1);
  for (int r = 0; r < n_support; ++r) {
    std::copy(res.support_grad.row(r).data(), res.support_grad.row(r).data() + emb.c, grad.sample(r).begin());
  }
  for (int r = 0; r < emb.n - n_support; ++r) {
    std::copy(res.query_grad.row(r).data(), res.query_grad.row(r).data() + emb.c,
              grad.sample(n_support + r).begin());
  }
  opt.zero_grad();
  enc.backward(grad, first_block);
  const double norm = opt.step(epoch);
  return {res.loss, res.correct, norm};
}

// Shared episodic loop for stage B and fine-tuning.
ClassifierTraining episodic_training(const RunConfig& cfg, const Corpus& corpus, const DataSplits& splits,
                                     EmbeddingEncoder<float> enc, LocalizationMode mode,
                                     const FeatureMapEncoder<float>* rpn, std::size_t first_block,
                                     std::uint64_t salt, const std::string& stage, MetricsLog* log) {
  const auto images = float_images(corpus);
  const EpisodeSampler sampler(corpus, splits.train);
  EpisodeConfig ecfg = cfg.episode;
  ecfg.seed = splitmix64(cfg.seed ^ salt);
  sampler.check_feasible(ecfg);
  const AugmentPolicy policy = policy_for(cfg, salt);

  auto all = enc.backbone().parameters();
  std::vector<nn::Parameter<float>*> trainable;
  for (std::size_t b = 0; b < enc.backbone().block_count(); ++b) {
    for (auto* p : enc.backbone().block(b).parameters()) {
      if (b >= first_block) trainable.push_back(p);
    }
  }
  Optimizer<float> opt(optimizer_for(cfg, false), trainable);

  const EvalOptions val = validation_options(cfg, mode);

  ClassifierTraining out{enc, 0.0, -1, {}};
  std::vector<std::vector<float>> best = snapshot(all);
  double best_acc = -1.0;
  if (cfg.val_episodes > 0) {
    best_acc = evaluate(val, corpus, splits.val, enc, rpn).accuracy;
    if (log) log->write({{"stage", stage}, {"epoch", 0}, {"split", "val"}, {"accuracy", best_acc}, {"seed", cfg.seed}});
  }
  const auto t0 = Clock::now();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss = 0.0;
    long correct = 0;
    for (int e = 0; e < cfg.episodes_per_epoch; ++e) {
      const auto step = static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(cfg.episodes_per_epoch) +
                        static_cast<std::uint64_t>(e);
      const Episode ep = sampler.sample(ecfg, step);
      const EpisodeInputs in =
          episode_inputs(ep, mode, corpus, images, cfg.augment, policy, step, rpn, cfg.binarize_threshold);
      const StepResult r = classifier_train_step(enc, opt, in, ecfg.ways, ecfg.shots, first_block, epoch);
      check_finite(r.loss, stage, epoch, e, r.grad_norm);
      loss += r.loss;
      correct += r.correct;
    }
    loss /= cfg.episodes_per_epoch;
    const double train_acc =
        static_cast<double>(correct) / (static_cast<double>(cfg.episodes_per_epoch) * ecfg.queries_per_episode);
    out.epoch_loss.push_back(loss);
    if (log) {
      log->write({{"stage", stage}, {"epoch", epoch + 1}, {"split", "train"}, {"loss", loss},
                  {"accuracy", train_acc}, {"seed", cfg.seed}});
    }
    double val_acc = 0.0;
    if (cfg.val_episodes > 0) {
      val_acc = evaluate(val, corpus, splits.val, enc, rpn).accuracy;
      if (log) {
        log->write({{"stage", stage}, {"epoch", epoch + 1}, {"split", "val"}, {"accuracy", val_acc}, {"seed", cfg.seed}});
      }
    }
    spdlog::info("{} epoch {}/{}: loss {:.4f} train acc {:.3f} val acc {:.3f} ({:.0f}s)", stage, epoch + 1,
                 cfg.epochs, loss, train_acc, val_acc, seconds_since(t0));
    if (cfg.val_episodes == 0 || val_acc > best_acc) {
      best_acc = val_acc;
      best = snapshot(all);
      out.best_epoch = epoch + 1;
    }
  }
  restore(all, best);
  out.encoder = std::move(enc);
  out.best_val_accuracy = std::max(best_acc, 0.0);
  return out;
}

std::vector<float> embed_one(const EmbeddingEncoder<float>& enc, const Image& image, const SoftMask* mask) {
  return encode_embedding(enc, image, mask);
}

}  // namespace

// --- metrics -------------------------------------------------------------------

MetricsLog::MetricsLog(const std::filesystem::path& path) {
  if (path.empty()) return;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
  if (!out_) throw DataError("cannot open metrics file " + path.string());
}

void MetricsLog::write(const nlohmann::json& record) {
  if (!out_.is_open()) return;
  out_ << record.dump() << '\n';
  out_.flush();
}

// --- data ----------------------------------------------------------------------

PreparedData prepare_data(const RunConfig& cfg, Corpus corpus) {
  PreparedData out;
  out.corpus = std::move(corpus);
  const ClassSplits cs = make_class_splits(out.corpus.class_ids(), cfg.split, cfg.split_seed, cfg.test_classes);
  out.splits = enforce_image_disjointness(out.corpus, assign_samples(out.corpus, cs));
  if (!cfg.split_dir.empty()) write_split_manifests(cfg.split_dir, out.corpus, out.splits);
  spdlog::info("splits: {} / {} / {} classes, {} / {} / {} samples", cs.train.size(), cs.val.size(), cs.test.size(),
               out.splits.train.samples.size(), out.splits.val.samples.size(), out.splits.test.samples.size());
  return out;
}

PreparedData prepare_data(const RunConfig& cfg) {
  if (cfg.manifest.empty()) throw ConfigError("no manifest configured");
  const RawDataset raw = load_annotations(resolve_data_path(cfg.manifest));
  FilterConfig fc;
  fc.min_images_per_class = cfg.min_images_per_class;
  fc.min_area_fraction = cfg.min_area_fraction;
  const RawDataset filtered = filter_dataset(raw, fc);
  if (filtered.annotations.empty()) throw DataError("no annotations survive filtering");
  return prepare_data(cfg, build_corpus(filtered));
}

// --- region proposal -------------------------------------------------------------

RpnTraining train_rpn(const RunConfig& cfg, const Corpus& corpus, const DataSplits& splits, MetricsLog* log) {
  const auto images = float_images(corpus);
  FeatureMapEncoder<float> rpn(backbone_for(cfg, corpus, 3, true), splitmix64(cfg.seed ^ kRpnSalt));
  const EpisodeSampler sampler(corpus, splits.train);
  EpisodeConfig ecfg{1, cfg.episode.shots, cfg.rpn_queries, splitmix64(cfg.seed ^ kRpnSalt)};
  sampler.check_feasible(ecfg);
  const AugmentPolicy policy = policy_for(cfg, kRpnSalt);
  auto params = rpn.backbone().parameters();
  Optimizer<float> opt(optimizer_for(cfg, false), params);

  RpnTraining out{rpn, 0.0, -1, {}};
  std::vector<std::vector<float>> best = snapshot(params);
  double best_iou = -1.0;
  const std::uint64_t val_seed = splitmix64(cfg.seed ^ kValSalt);
  const auto t0 = Clock::now();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss = 0.0;
    for (int e = 0; e < cfg.episodes_per_epoch; ++e) {
      const auto step = static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(cfg.episodes_per_epoch) +
                        static_cast<std::uint64_t>(e);
      const Episode ep = sampler.sample(ecfg, step);
      std::vector<View> support;
      std::vector<View> queries;
      std::uint64_t slot = 0;
      for (auto s : ep.support.front()) {
        support.push_back(make_view(images, corpus, s, cfg.augment, policy, draw_index(step, slot++)));
      }
      for (const auto& q : ep.queries) {
        queries.push_back(make_view(images, corpus, q.sample, cfg.augment, policy, draw_index(step, slot++)));
      }
      const RpnStep r = rpn_train_step(rpn, opt, support, queries, cfg.rpn_loss_at_feature_resolution, epoch);
      check_finite(r.loss, "train-rpn", epoch, e, r.grad_norm);
      loss += r.loss;
    }
    loss /= cfg.episodes_per_epoch;
    out.epoch_loss.push_back(loss);
    double val_iou = 0.0;
    if (cfg.val_episodes > 0) {
      val_iou = evaluate_rpn(rpn, corpus, splits.val, cfg.val_episodes, cfg.episode.shots, val_seed).mean_iou;
    }
    if (log) {
      log->write({{"stage", "train-rpn"}, {"epoch", epoch + 1}, {"split", "train"}, {"loss", loss}, {"seed", cfg.seed}});
      log->write({{"stage", "train-rpn"}, {"epoch", epoch + 1}, {"split", "val"}, {"iou", val_iou}, {"seed", cfg.seed}});
    }
    spdlog::info("train-rpn epoch {}/{}: loss {:.4f} val IoU {:.3f} ({:.0f}s)", epoch + 1, cfg.epochs, loss, val_iou,
                 seconds_since(t0));
    if (cfg.val_episodes == 0 || val_iou > best_iou) {
      best_iou = val_iou;
      best = snapshot(params);
      out.best_epoch = epoch + 1;
    }
  }
  restore(params, best);
  out.encoder = std::move(rpn);
  out.best_val_iou = std::max(best_iou, 0.0);
  return out;
}

RpnReport evaluate_rpn(const FeatureMapEncoder<float>& rpn, const Corpus& corpus, const SampleSplit& split,
                       int episodes, int shots, std::uint64_t seed) {
  const auto images = float_images(corpus);
  const EpisodeSampler sampler(corpus, split);
  const EpisodeConfig ecfg{1, shots, 1, seed};
  std::unordered_map<std::size_t, FeatureMap> cache;
  auto features = [&](std::size_t sample) -> const FeatureMap& {
    auto it = cache.find(sample);
    if (it == cache.end()) {
      it = cache.emplace(sample, encode_feature_map(rpn, images[corpus.samples[sample].image_index])).first;
    }
    return it->second;
  };
  RpnReport report;
  double iou = 0.0;
  int fg_wins = 0;
  for (int e = 0; e < episodes; ++e) {
    const Episode ep = sampler.sample(ecfg, static_cast<std::uint64_t>(e));
    std::vector<FeatureMap> maps;
    std::vector<const SoftMask*> masks;
    for (auto s : ep.support.front()) {
      maps.push_back(features(s));
      masks.push_back(&corpus.samples[s].mask);
    }
    const auto proto = prototype_from_features(std::span<const FeatureMap>(maps),
                                               std::span<const SoftMask* const>(masks), rpn.downsample_factor());
    const AnnotatedSample& q = corpus.samples[ep.queries.front().sample];
    const SoftMask prop = propose_from_features(std::span<const float>(proto), features(ep.queries.front().sample),
                                                rpn.downsample_factor(), q.mask.height, q.mask.width, {});
    iou += mask_iou(prop, q.mask, 0.5f);
    double fg = 0.0, bg = 0.0, nfg = 0.0, nbg = 0.0;
    for (std::size_t i = 0; i < prop.values.size(); ++i) {
      if (q.mask.values[i] >= 0.5f) {
        fg += prop.values[i];
        nfg += 1.0;
      } else {
        bg += prop.values[i];
        nbg += 1.0;
      }
    }
    if (nbg == 0.0 || (nfg > 0.0 && fg / nfg > bg / nbg)) ++fg_wins;
  }
  report.episodes = episodes;
  report.mean_iou = episodes > 0 ? iou / episodes : 0.0;
  report.foreground_above_background = episodes > 0 ? static_cast<double>(fg_wins) / episodes : 0.0;
  return report;
}

// --- classifier ------------------------------------------------------------------

ClassifierTraining pretrain_classifier(const RunConfig& cfg, const Corpus& corpus, const DataSplits& splits,
                                       int input_channels, MetricsLog* log) {
  const auto images = float_images(corpus);
  const std::uint64_t salt = kStageASalt + static_cast<std::uint64_t>(input_channels);
  EmbeddingEncoder<float> enc(backbone_for(cfg, corpus, input_channels, false), splitmix64(cfg.seed ^ salt));
  std::unordered_map<std::int64_t, int> label_of;
  for (std::size_t i = 0; i < splits.train.classes.size(); ++i) {
    label_of[splits.train.classes[i]] = static_cast<int>(i);
  }
  const int n_classes = static_cast<int>(label_of.size());
  if (n_classes < 2) throw ConfigError("stage A needs at least two training classes");
  const auto& pool = splits.train.samples;
  if (pool.empty()) throw DataError("training split has no samples");

  nn::Linear<float> head("head", enc.embedding_dim(), n_classes);
  std::mt19937_64 head_rng(splitmix64(cfg.seed ^ salt ^ 0x1eadULL));
  head.init_uniform(head_rng);
  auto params = enc.backbone().parameters();
  params.push_back(&head.weight);
  params.push_back(&head.bias);
  Optimizer<float> opt(optimizer_for(cfg, true), params);
  const AugmentPolicy policy = policy_for(cfg, salt);
  const bool with_mask = input_channels == 4;

  ClassifierTraining out{enc, 0.0, 0, {}};
  const auto t0 = Clock::now();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss = 0.0;
    long correct = 0;
    for (int step = 0; step < cfg.episodes_per_epoch; ++step) {
      const auto global = static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(cfg.episodes_per_epoch) +
                          static_cast<std::uint64_t>(step);
      KeyedRng rng(cfg.seed ^ salt, {global});
      std::vector<View> views;
      std::vector<int> labels;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const std::size_t s = pool[rng.below(pool.size())];
        views.push_back(make_view(images, corpus, s, cfg.augment, policy, draw_index(global, static_cast<std::uint64_t>(b))));
        labels.push_back(label_of.at(corpus.samples[s].class_id));
      }
      std::vector<const Image*> imgs;
      std::vector<const SoftMask*> masks;
      for (const auto& v : views) {
        imgs.push_back(&v.image);
        if (with_mask) masks.push_back(&v.mask);
      }
      const Tensor<float> emb = enc.forward_train(enc.assemble(imgs, masks));
      const Tensor<float> logits = head.forward_train(emb);
      Tensor<float> grad(logits.n, logits.c, 1, 1);
      double batch_loss = 0.0;
      for (int i = 0; i < logits.n; ++i) {
        auto row = logits.sample(i);
        const float top = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (float v : row) z += std::exp(static_cast<double>(v - top));
        const int argmax = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        correct += argmax == labels[static_cast<std::size_t>(i)];
        batch_loss += -(row[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] - top - std::log(z));
        auto g = grad.sample(i);
        for (int c = 0; c < logits.c; ++c) {
          const double p = std::exp(static_cast<double>(row[static_cast<std::size_t>(c)] - top)) / z;
          g[static_cast<std::size_t>(c)] =
              static_cast<float>((p - (c == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0)) / logits.n);
        }
      }
      batch_loss /= logits.n;
      opt.zero_grad();
      enc.backward(head.backward(grad));
      const double norm = opt.step(epoch);
      check_finite(batch_loss, "pretrain-cls", epoch, step, norm);
      loss += batch_loss;
    }
    loss /= cfg.episodes_per_epoch;
    const double acc =
        static_cast<double>(correct) / (static_cast<double>(cfg.episodes_per_epoch) * cfg.batch_size);
    out.epoch_loss.push_back(loss);
    if (log) {
      log->write({{"stage", "pretrain-cls"}, {"epoch", epoch + 1}, {"split", "train"}, {"loss", loss},
                  {"accuracy", acc}, {"seed", cfg.seed}});
    }
    spdlog::info("pretrain-cls ({}ch) epoch {}/{}: loss {:.4f} train acc {:.3f} ({:.0f}s)", input_channels,
                 epoch + 1, cfg.epochs, loss, acc, seconds_since(t0));
    out.best_epoch = epoch + 1;
  }
  out.encoder = std::move(enc);
  return out;
}

ClassifierTraining train_fewshot_classifier(const RunConfig& cfg, const Corpus& corpus, const DataSplits& splits,
                                            EmbeddingEncoder<float> init, LocalizationMode mode, MetricsLog* log) {
  if (mode == LocalizationMode::propnet) {
    throw ConfigError("stage B trains with ground-truth masks; use finetune for proposals");
  }
  if ((mode == LocalizationMode::none) != (init.input_channels() == 3)) {
    throw ConfigError("mode " + to_string(mode) + " does not suit a " + std::to_string(init.input_channels()) +
                      "-channel encoder");
  }
  return episodic_training(cfg, corpus, splits, std::move(init), mode, nullptr, 0,
                           kStageBSalt + static_cast<std::uint64_t>(mode), "train-fewshot", log);
}

ClassifierTraining finetune_on_proposals(const RunConfig& cfg, const Corpus& corpus, const DataSplits& splits,
                                         const FeatureMapEncoder<float>& rpn, EmbeddingEncoder<float> classifier,
                                         MetricsLog* log) {
  if (classifier.input_channels() != 4) throw ConfigError("fine-tuning needs a 4-channel classifier");
  const std::size_t last = classifier.backbone().block_count() - 1;
  return episodic_training(cfg, corpus, splits, std::move(classifier), LocalizationMode::propnet, &rpn, last,
                           kFinetuneSalt, "finetune", log);
}

// --- evaluation ------------------------------------------------------------------

EvalOptions validation_options(const RunConfig& cfg, LocalizationMode mode) {
  EvalOptions val;
  val.mode = mode;
  val.episode = cfg.episode;
  val.episodes = cfg.val_episodes;
  val.seeds = {splitmix64(cfg.seed ^ kValSalt)};
  val.binarize_threshold = cfg.binarize_threshold;
  return val;
}

double confidence_half_width(double accuracy, long predictions) {
  if (predictions <= 0) return 0.0;
  return 1.96 * std::sqrt(accuracy * (1.0 - accuracy) / static_cast<double>(predictions));
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : r.per_seed) {
    seeds.push_back({{"seed", s.seed}, {"episodes", s.episodes}, {"correct", s.correct}, {"total", s.total},
                     {"accuracy", s.accuracy}});
  }
  return {{"mode", to_string(r.mode)}, {"accuracy", r.accuracy},   {"episodes", r.episodes},
          {"queries_per_episode", r.queries_per_episode},        {"correct", r.correct},
          {"total", r.total},         {"half_width_95", r.half_width}, {"per_seed", seeds}};
}

EvalReport evaluate(const EvalOptions& opts, const Corpus& corpus, const SampleSplit& split,
                    const EmbeddingEncoder<float>& classifier, const FeatureMapEncoder<float>* rpn) {
  const LocalizationMode mode = opts.mode;
  if ((mode == LocalizationMode::none) != (classifier.input_channels() == 3)) {
    throw ConfigError("mode " + to_string(mode) + " needs a " +
                      std::string(mode == LocalizationMode::none ? "3" : "4") + "-channel classifier");
  }
  if (mode == LocalizationMode::propnet && rpn == nullptr && !opts.proposal_hook) {
    throw ConfigError("propnet evaluation needs an RPN checkpoint");
  }
  const auto images = float_images(corpus);
  const EpisodeSampler sampler(corpus, split);
  const int ways = opts.episode.ways;
  const int shots = opts.episode.shots;

  // Embeddings that do not depend on the episode are computed once.
  std::unordered_map<std::size_t, std::vector<float>> support_cache;
  std::unordered_map<std::size_t, std::vector<float>> query_cache;
  std::unordered_map<std::size_t, FeatureMap> rpn_cache;
  auto image_of = [&](std::size_t s) -> const Image& { return images[corpus.samples[s].image_index]; };
  auto support_embedding = [&](std::size_t s) -> const std::vector<float>& {
    auto it = support_cache.find(s);
    if (it == support_cache.end()) {
      const SoftMask* m = mode == LocalizationMode::none ? nullptr : &corpus.samples[s].mask;
      it = support_cache.emplace(s, embed_one(classifier, image_of(s), m)).first;
    }
    return it->second;
  };
  auto query_embedding = [&](std::size_t s) -> const std::vector<float>& {
    auto it = query_cache.find(s);
    if (it == query_cache.end()) {
      const Image& im = image_of(s);
      const SoftMask ones = SoftMask::ones(im.height, im.width);
      const SoftMask* m = mode == LocalizationMode::none      ? nullptr
                          : mode == LocalizationMode::support ? &ones
                                                              : &corpus.samples[s].mask;
      it = query_cache.emplace(s, embed_one(classifier, im, m)).first;
    }
    return it->second;
  };
  auto rpn_features = [&](std::size_t s) -> const FeatureMap& {
    auto it = rpn_cache.find(s);
    if (it == rpn_cache.end()) it = rpn_cache.emplace(s, encode_feature_map(*rpn, image_of(s))).first;
    return it->second;
  };

  EvalReport report;
  report.mode = mode;
  report.queries_per_episode = opts.episode.queries_per_episode;
  const int dim = classifier.embedding_dim();
  for (const std::uint64_t seed : opts.seeds) {
    EpisodeConfig ecfg = opts.episode;
    ecfg.seed = seed;
    sampler.check_feasible(ecfg);
    SeedResult sr;
    sr.seed = seed;
    for (int e = 0; e < opts.episodes; ++e) {
      const Episode ep = sampler.sample(ecfg, static_cast<std::uint64_t>(e));
      Matrix<float> centroids = Matrix<float>::Zero(ways, dim);
      for (int k = 0; k < ways; ++k) {
        for (auto s : ep.support[static_cast<std::size_t>(k)]) {
          const auto& v = support_embedding(s);
          centroids.row(k) += Eigen::Map<const Vector<float>>(v.data(), dim).transpose();
        }
        centroids.row(k) /= static_cast<float>(shots);
      }
      std::vector<std::vector<float>> protos;
      if (mode == LocalizationMode::propnet && !opts.proposal_hook) {
        for (int k = 0; k < ways; ++k) {
          std::vector<FeatureMap> maps;
          std::vector<const SoftMask*> masks;
          for (auto s : ep.support[static_cast<std::size_t>(k)]) {
            maps.push_back(rpn_features(s));
            masks.push_back(&corpus.samples[s].mask);
          }
          protos.push_back(prototype_from_features(std::span<const FeatureMap>(maps),
                                                   std::span<const SoftMask* const>(masks), rpn->downsample_factor()));
        }
      }
      for (const auto& q : ep.queries) {
        BasicClassScores<float> scores;
        if (mode != LocalizationMode::propnet) {
          const auto& v = query_embedding(q.sample);
          scores = classify_query<float>(Vector<float>(Eigen::Map<const Vector<float>>(v.data(), dim)), centroids);
        } else {
          const Image& im = image_of(q.sample);
          std::vector<SoftMask> props;
          for (int k = 0; k < ways; ++k) {
            if (opts.proposal_hook) {
              props.push_back(opts.proposal_hook(ep, k, q.sample));
            } else {
              ProposalOptions po;
              po.binarize_threshold = opts.binarize_threshold;
              props.push_back(propose_from_features(std::span<const float>(protos[static_cast<std::size_t>(k)]),
                                                    rpn_features(q.sample), rpn->downsample_factor(), im.height,
                                                    im.width, po));
            }
          }
          // one forward per class, the same path the oracle query takes
          Matrix<float> per_class(ways, dim);
          for (int k = 0; k < ways; ++k) {
            const auto v = embed_one(classifier, im, &props[static_cast<std::size_t>(k)]);
            per_class.row(k) = Eigen::Map<const Vector<float>>(v.data(), dim).transpose();
          }
          scores = classify_query<float>(per_class, centroids);
        }
        sr.correct += scores.predicted == q.label;
        ++sr.total;
      }
      ++sr.episodes;
    }
    sr.accuracy = sr.total > 0 ? static_cast<double>(sr.correct) / static_cast<double>(sr.total) : 0.0;
    report.correct += sr.correct;
    report.total += sr.total;
    report.episodes += sr.episodes;
    report.per_seed.push_back(sr);
  }
  report.accuracy = report.total > 0 ? static_cast<double>(report.correct) / static_cast<double>(report.total) : 0.0;
  report.half_width = confidence_half_width(report.accuracy, report.total);
  return report;
}

// --- stage runners -----------------------------------------------------------------

namespace {

void require_path(const std::filesystem::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " is not configured");
}

void save_with_metadata(Checkpoint ckpt, const RunConfig& cfg, nlohmann::json meta) {
  require_path(cfg.output, "output checkpoint path");
  meta["seed"] = cfg.seed;
  meta["stage"] = cfg.stage;
  ckpt.metadata = std::move(meta);
  save_checkpoint(cfg.output, ckpt);
  spdlog::info("wrote {}", cfg.output.string());
}

}  // namespace

void run_train_rpn(const RunConfig& cfg) {
  validate(cfg);
  const PreparedData data = prepare_data(cfg);
  MetricsLog log(cfg.metrics);
  RpnTraining r = train_rpn(cfg, data.corpus, data.splits, &log);
  save_with_metadata(make_checkpoint(r.encoder), cfg, {{"best_val_iou", r.best_val_iou}, {"best_epoch", r.best_epoch}});
}

void run_pretrain_classifier(const RunConfig& cfg) {
  validate(cfg);
  const PreparedData data = prepare_data(cfg);
  MetricsLog log(cfg.metrics);
  ClassifierTraining r = pretrain_classifier(cfg, data.corpus, data.splits, cfg.input_channels, &log);
  save_with_metadata(make_checkpoint(r.encoder), cfg, {{"input_channels", cfg.input_channels}});
}

void run_train_fewshot(const RunConfig& cfg) {
  validate(cfg);
  require_path(cfg.classifier_checkpoint, "classifier_checkpoint (stage A)");
  const PreparedData data = prepare_data(cfg);
  MetricsLog log(cfg.metrics);
  EmbeddingEncoder<float> init = embedding_encoder_from(load_checkpoint(cfg.classifier_checkpoint));
  ClassifierTraining r = train_fewshot_classifier(cfg, data.corpus, data.splits, std::move(init), cfg.mode, &log);
  save_with_metadata(make_checkpoint(r.encoder), cfg,
                     {{"mode", to_string(cfg.mode)}, {"best_val_accuracy", r.best_val_accuracy}, {"best_epoch", r.best_epoch}});
}

void run_finetune(const RunConfig& cfg) {
  validate(cfg);
  require_path(cfg.classifier_checkpoint, "classifier_checkpoint");
  require_path(cfg.rpn_checkpoint, "rpn_checkpoint");
  const PreparedData data = prepare_data(cfg);
  MetricsLog log(cfg.metrics);
  const FeatureMapEncoder<float> rpn = feature_map_encoder_from(load_checkpoint(cfg.rpn_checkpoint));
  EmbeddingEncoder<float> cls = embedding_encoder_from(load_checkpoint(cfg.classifier_checkpoint));
  ClassifierTraining r = finetune_on_proposals(cfg, data.corpus, data.splits, rpn, std::move(cls), &log);
  save_with_metadata(make_checkpoint(r.encoder), cfg,
                     {{"mode", "propnet"}, {"best_val_accuracy", r.best_val_accuracy}, {"best_epoch", r.best_epoch}});
}

EvalReport run_evaluate(const RunConfig& cfg) {
  validate(cfg);
  require_path(cfg.classifier_checkpoint, "classifier_checkpoint");
  const PreparedData data = prepare_data(cfg);
  const EmbeddingEncoder<float> cls = embedding_encoder_from(load_checkpoint(cfg.classifier_checkpoint));
  std::optional<FeatureMapEncoder<float>> rpn;
  if (cfg.mode == LocalizationMode::propnet) {
    require_path(cfg.rpn_checkpoint, "rpn_checkpoint");
    rpn = feature_map_encoder_from(load_checkpoint(cfg.rpn_checkpoint));
  }
  EvalOptions opts;
  opts.mode = cfg.mode;
  opts.episode = cfg.episode;
  opts.episodes = cfg.eval_episodes;
  opts.seeds = cfg.seeds_for_eval();
  opts.binarize_threshold = cfg.binarize_threshold;
  EvalReport report = evaluate(opts, data.corpus, data.splits.test, cls, rpn ? &*rpn : nullptr);
  MetricsLog log(cfg.metrics);
  log.write({{"stage", "eval"}, {"split", "test"}, {"mode", to_string(cfg.mode)}, {"accuracy", report.accuracy},
             {"seed", cfg.seed}});
  return report;
}

}  // namespace busyshot
