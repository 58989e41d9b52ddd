// Central finite differences against the hand-written backward passes, in double.

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "busyshot/encoder.hpp"
#include "busyshot/lovasz.hpp"
#include "busyshot/nn.hpp"
#include "busyshot/rpn.hpp"

using namespace busyshot;

namespace {

Tensor<double> random_tensor(int n, int c, int h, int w, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor<double> t(n, c, h, w);
  for (auto& v : t.data) v = d(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1e-6, std::abs(analytic), std::abs(numeric)});
}

// Checks a strided subset of every parameter; returns the worst relative error.
double check_parameters(const std::vector<nn::Parameter<double>*>& params, const std::function<double()>& loss,
                        std::size_t stride) {
  const double eps = 1e-5;
  double worst = 0.0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->size(); i += stride) {
      const double keep = p->value[i];
      p->value[i] = keep + eps;
      const double up = loss();
      p->value[i] = keep - eps;
      const double down = loss();
      p->value[i] = keep;
      worst = std::max(worst, relative_error(p->grad[i], (up - down) / (2 * eps)));
    }
  }
  return worst;
}

BackboneConfig tiny_config(int channels) {
  BackboneConfig c;
  c.input_channels = channels;
  c.widths = {4, 6, 8};
  c.norm_groups = 2;
  return c;
}

}  // namespace

TEST(Gradients, FeatureMapBackboneMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  Backbone<double> net(tiny_config(3), true, 5);
  const Tensor<double> x = random_tensor(2, 3, 8, 8, rng);
  const Tensor<double> probe = random_tensor(2, 8, 2, 2, rng);
  for (auto* p : net.parameters()) p->zero_grad();
  const Tensor<double> y = net.forward_train(x);
  ASSERT_TRUE(y.same_shape(probe));
  net.backward(probe);
  const double worst = check_parameters(net.parameters(), [&] { return dot(net.forward(x), probe); }, 3);
  EXPECT_LT(worst, 1e-4);
}

TEST(Gradients, EmbeddingEncoderMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  EmbeddingEncoder<double> enc(tiny_config(4), 9);
  const Tensor<double> x = random_tensor(3, 4, 8, 8, rng);
  const Tensor<double> probe = random_tensor(3, 8, 1, 1, rng);
  auto params = enc.backbone().parameters();
  for (auto* p : params) p->zero_grad();
  enc.forward_train(x);
  enc.backward(probe);
  const double worst = check_parameters(params, [&] { return dot(enc.forward(x), probe); }, 3);
  EXPECT_LT(worst, 1e-4);
}

TEST(Gradients, PartialBackwardLeavesEarlierBlocksWithoutGradient) {
  std::mt19937_64 rng(13);
  EmbeddingEncoder<double> enc(tiny_config(4), 9);
  const Tensor<double> x = random_tensor(2, 4, 8, 8, rng);
  auto params = enc.backbone().parameters();
  for (auto* p : params) p->zero_grad();
  enc.forward_train(x, 2);
  enc.backward(random_tensor(2, 8, 1, 1, rng), 2);
  for (auto* p : params) {
    const bool last = p->name.rfind("block2.", 0) == 0;
    double mass = 0.0;
    for (double g : p->grad) mass += std::abs(g);
    if (last) {
      EXPECT_GT(mass, 0.0) << p->name;
    } else {
      EXPECT_EQ(mass, 0.0) << p->name;
    }
  }
}

// Prototype -> cosine map -> (s+1)/2 -> bilinear upsample, read out linearly.
TEST(Gradients, ProposalChainMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  const int c = 5, h = 3, w = 4, factor = 4, shots = 2;
  std::vector<BasicFeatureMap<double>> feats;
  std::vector<BasicSoftMask<double>> masks;
  for (int i = 0; i <= shots; ++i) {
    BasicFeatureMap<double> f(c, h, w);
    for (auto& v : f.values) v = nd(rng);
    feats.push_back(f);
    BasicSoftMask<double> m(h, w);
    for (auto& v : m.values) v = ud(rng);
    masks.push_back(m);
  }
  BasicSoftMask<double> readout(h * factor, w * factor);
  for (auto& v : readout.values) v = nd(rng);

  auto loss = [&] {
    const auto proto = class_prototype(std::span<const BasicFeatureMap<double>>(feats.data(), shots),
                                       std::span<const BasicSoftMask<double>>(masks.data(), shots));
    const auto sim = similarity_map(std::span<const double>(proto), feats[shots]);
    std::vector<double> unit(sim.values.size());
    for (std::size_t i = 0; i < unit.size(); ++i) unit[i] = (sim.values[i] + 1.0) / 2.0;
    const auto up = upsample_bilinear(std::span<const double>(unit), h, w, factor, h * factor, w * factor);
    double s = 0.0;
    for (std::size_t i = 0; i < up.values.size(); ++i) s += up.values[i] * readout.values[i];
    return s;
  };

  const auto proto = class_prototype(std::span<const BasicFeatureMap<double>>(feats.data(), shots),
                                     std::span<const BasicSoftMask<double>>(masks.data(), shots));
  const auto sim = similarity_map(std::span<const double>(proto), feats[shots]);
  auto low = upsample_bilinear_backward(readout, h, w, factor);
  for (auto& v : low) v *= 0.5;
  BasicFeatureMap<double> qgrad(c, h, w);
  std::vector<double> pgrad(static_cast<std::size_t>(c), 0.0);
  similarity_map_backward(std::span<const double>(proto), feats[shots], sim, std::span<const double>(low), qgrad,
                          std::span<double>(pgrad));
  std::vector<BasicFeatureMap<double>> grads;
  for (int i = 0; i < shots; ++i) {
    BasicFeatureMap<double> g(c, h, w);
    class_prototype_backward(std::span<const double>(pgrad), masks[static_cast<std::size_t>(i)], shots, g);
    grads.push_back(g);
  }
  grads.push_back(qgrad);

  const double eps = 1e-6;
  double worst = 0.0;
  for (std::size_t k = 0; k < feats.size(); ++k) {
    for (std::size_t i = 0; i < feats[k].values.size(); ++i) {
      const double keep = feats[k].values[i];
      feats[k].values[i] = keep + eps;
      const double up = loss();
      feats[k].values[i] = keep - eps;
      const double down = loss();
      feats[k].values[i] = keep;
      worst = std::max(worst, relative_error(grads[k].values[i], (up - down) / (2 * eps)));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Gradients, LovaszMatchesFiniteDifferencesAwayFromTies) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> ud(0.05, 0.95);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 12;
    std::vector<double> p(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = ud(rng);
      y[i] = static_cast<std::uint8_t>(rng() % 2);
    }
    y[0] = 1;
    const auto res = lovasz_loss_with_grad(std::span<const double>(p), std::span<const std::uint8_t>(y));
    const double eps = 1e-7;
    for (std::size_t i = 0; i < n; ++i) {
      auto q = p;
      q[i] = p[i] + eps;
      const double up = lovasz_loss(std::span<const double>(q), std::span<const std::uint8_t>(y));
      q[i] = p[i] - eps;
      const double down = lovasz_loss(std::span<const double>(q), std::span<const std::uint8_t>(y));
      EXPECT_NEAR(res.grad[i], (up - down) / (2 * eps), 1e-6);
    }
  }
}
