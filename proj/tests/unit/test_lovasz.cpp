#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "busyshot/lovasz.hpp"

using namespace busyshot;

namespace {

// Jaccard loss of the set of "mispredicted" pixels, computed from scratch.
double jaccard_of_set(const std::vector<std::uint8_t>& y, const std::vector<bool>& wrong) {
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool fg = y[i] == 1;
    const bool pred_fg = fg != wrong[i];
    inter += fg && pred_fg;
    uni += fg || pred_fg;
  }
  return uni == 0.0 ? 0.0 : 1.0 - inter / uni;
}

// Lovász extension by summation by parts over level sets of the error vector.
double lovasz_reference(const std::vector<double>& p, const std::vector<std::uint8_t>& y) {
  const std::size_t n = p.size();
  std::vector<double> e(n);
  for (std::size_t i = 0; i < n; ++i) e[i] = std::abs(static_cast<double>(y[i]) - p[i]);
  std::vector<double> levels = e;
  std::sort(levels.begin(), levels.end(), std::greater<>());
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double next = k + 1 < n ? levels[k + 1] : 0.0;
    std::vector<bool> wrong(n);
    for (std::size_t i = 0; i < n; ++i) wrong[i] = e[i] >= levels[k];
    total += (levels[k] - next) * jaccard_of_set(y, wrong);
  }
  return total;
}

}  // namespace

TEST(Lovasz, MatchesLevelSetReferenceOnSmallVectors) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (std::size_t n = 1; n <= 6; ++n) {
    for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
      std::vector<std::uint8_t> y(n);
      bool any = false;
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<std::uint8_t>((bits >> i) & 1u);
        any = any || y[i];
      }
      if (!any) continue;
      for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> p(n);
        for (auto& v : p) v = u(rng);
        const double got = lovasz_loss(std::span<const double>(p), std::span<const std::uint8_t>(y));
        worst = std::max(worst, std::abs(got - lovasz_reference(p, y)));
      }
    }
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Lovasz, PerfectAndFullyWrongPredictions) {
  const std::vector<std::uint8_t> y{1, 0, 1, 0, 0};
  const std::vector<double> perfect{1, 0, 1, 0, 0};
  const std::vector<double> wrong{0, 1, 0, 1, 1};
  EXPECT_DOUBLE_EQ(lovasz_loss(std::span<const double>(perfect), std::span<const std::uint8_t>(y)), 0.0);
  EXPECT_DOUBLE_EQ(lovasz_loss(std::span<const double>(wrong), std::span<const std::uint8_t>(y)), 1.0);
}

TEST(Lovasz, GradWeightsSumToOne) {
  const std::vector<std::uint8_t> sorted{0, 1, 1, 0, 1, 0};
  const auto g = lovasz_grad(std::span<const std::uint8_t>(sorted));
  double s = 0.0;
  for (double v : g) {
    EXPECT_GE(v, -1e-15);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Lovasz, AllBackgroundFallsBackToMeanPrediction) {
  const std::vector<std::uint8_t> y(4, 0);
  const std::vector<double> p{0.2, 0.4, 0.0, 0.6};
  const auto r = lovasz_loss_with_grad(std::span<const double>(p), std::span<const std::uint8_t>(y));
  EXPECT_TRUE(r.all_background);
  EXPECT_NEAR(r.loss, 0.3, 1e-12);
}

TEST(Lovasz, StableSortKeepsTiesInInputOrder) {
  // Equal errors: the subgradient must follow input order, so the result is reproducible.
  const std::vector<std::uint8_t> y{1, 0, 1, 0};
  const std::vector<double> p{0.5, 0.5, 0.5, 0.5};
  const auto a = lovasz_loss_with_grad(std::span<const double>(p), std::span<const std::uint8_t>(y));
  const auto b = lovasz_loss_with_grad(std::span<const double>(p), std::span<const std::uint8_t>(y));
  EXPECT_EQ(a.grad, b.grad);
  const std::vector<std::uint8_t> sorted{1, 0, 1, 0};
  const auto g = lovasz_grad(std::span<const std::uint8_t>(sorted));
  EXPECT_DOUBLE_EQ(a.grad[0], -g[0]);
  EXPECT_DOUBLE_EQ(a.grad[1], g[1]);
}

TEST(Lovasz, BatchIsMeanOfImages) {
  const std::vector<std::vector<double>> p{{0.9, 0.1}, {0.2, 0.7}};
  const std::vector<std::vector<std::uint8_t>> y{{1, 0}, {1, 0}};
  const double a = lovasz_loss(std::span<const double>(p[0]), std::span<const std::uint8_t>(y[0]));
  const double b = lovasz_loss(std::span<const double>(p[1]), std::span<const std::uint8_t>(y[1]));
  EXPECT_NEAR(lovasz_loss_batch(std::span<const std::vector<double>>(p), std::span<const std::vector<std::uint8_t>>(y)),
              (a + b) / 2, 1e-15);
}

TEST(Lovasz, RejectsNonBinaryLabelsAndLengthMismatch) {
  const std::vector<double> p{0.5, 0.5};
  const std::vector<std::uint8_t> bad{1, 2};
  const std::vector<std::uint8_t> short_y{1};
  EXPECT_THROW(lovasz_loss(std::span<const double>(p), std::span<const std::uint8_t>(bad)), InputError);
  EXPECT_THROW(lovasz_loss(std::span<const double>(p), std::span<const std::uint8_t>(short_y)), ShapeError);
}
