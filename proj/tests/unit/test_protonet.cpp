#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "busyshot/protonet.hpp"

using namespace busyshot;

namespace {

Matrix<double> random_matrix(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix<double> m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = d(rng);
  }
  return m;
}

Vector<double> vec(std::initializer_list<double> v) {
  Vector<double> out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST(ProtoNet, CentroidIsMeanOfSupportRows) {
  Matrix<double> a(2, 2);
  a << 0, 0, 2, 4;
  Matrix<double> b(1, 2);
  b << -1, 3;
  const std::vector<Matrix<double>> support{a, b};
  const auto c = class_centroids(std::span<const Matrix<double>>(support));
  EXPECT_DOUBLE_EQ(c(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(c(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(c(1, 0), -1.0);
  EXPECT_DOUBLE_EQ(c(1, 1), 3.0);
}

TEST(ProtoNet, TwoClassSoftmaxValues) {
  // distances 0 and 2 -> p = (1/(1+e^-2), e^-2/(1+e^-2))
  const auto s = scores_from_distances(vec({0.0, 2.0}));
  EXPECT_NEAR(s.probabilities(0), 0.8807970779778823, 1e-12);
  EXPECT_NEAR(s.probabilities(1), 0.11920292202211755, 1e-12);
  EXPECT_NEAR(nll_loss(s, 0), 0.12692801104297263, 1e-12);
  EXPECT_EQ(s.predicted, 0);
}

TEST(ProtoNet, UniformDistancesGiveLogWays) {
  const auto s = scores_from_distances(vec({3.0, 3.0, 3.0, 3.0, 3.0}));
  EXPECT_NEAR(nll_loss(s, 2), std::log(5.0), 1e-12);
  EXPECT_EQ(s.predicted, 0);  // ties resolve to the lowest index
}

TEST(ProtoNet, SoftmaxNormalizedAndShiftInvariant) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    Vector<double> d(5);
    for (int k = 0; k < 5; ++k) d(k) = u(rng);
    const auto s = scores_from_distances(d);
    EXPECT_NEAR(s.probabilities.sum(), 1.0, 1e-12);
    const double shift = u(rng);
    const auto t = scores_from_distances(Vector<double>(d.array() + shift));
    EXPECT_LT((s.probabilities - t.probabilities).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(s.predicted, t.predicted);
    Eigen::Index argmin = 0;
    d.minCoeff(&argmin);
    EXPECT_EQ(s.predicted, argmin);
  }
}

TEST(ProtoNet, ClassificationInvariantToCommonTranslation) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix<double> centroids = random_matrix(5, 8, rng);
    const Vector<double> q = random_matrix(8, 1, rng).col(0);
    const Vector<double> shift = random_matrix(8, 1, rng, 10.0).col(0);
    Matrix<double> moved = centroids;
    moved.rowwise() += shift.transpose();
    const auto a = classify_query(q, centroids);
    const auto b = classify_query(Vector<double>(q + shift), moved);
    EXPECT_EQ(a.predicted, b.predicted);
    EXPECT_LT((a.probabilities - b.probabilities).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(ProtoNet, ExtremeDistancesStayFinite) {
  const auto s = scores_from_distances(vec({0.0, 1e6}));
  EXPECT_TRUE(std::isfinite(nll_loss(s, 1)));
  EXPECT_NEAR(nll_loss(s, 1), -std::log(kProbabilityFloor), 1e-9);
}

TEST(ProtoNet, LabelOutOfRangeThrows) {
  const auto s = scores_from_distances(vec({0.0, 1.0}));
  EXPECT_THROW(nll_loss(s, 2), std::out_of_range);
  EXPECT_THROW(nll_loss(s, -1), std::out_of_range);
}

TEST(ProtoNet, MismatchedDimensionsThrow) {
  Matrix<double> c(2, 3);
  c.setZero();
  EXPECT_THROW(classify_query(Vector<double>(Vector<double>::Zero(4)), c), ShapeError);
}

namespace {

void check_episode_gradient(bool per_class) {
  std::mt19937_64 rng(per_class ? 24 : 23);
  const int ways = 3, shots = 2, dim = 4, queries = 2;
  Matrix<double> support = random_matrix(ways * shots, dim, rng);
  Matrix<double> query = random_matrix(queries * (per_class ? ways : 1), dim, rng);
  const std::vector<int> labels{1, 2};
  const auto res = episode_loss(support, ways, shots, query, std::span<const int>(labels), per_class);
  auto loss = [&] {
    return episode_loss(support, ways, shots, query, std::span<const int>(labels), per_class).loss;
  };
  const double eps = 1e-6;
  auto check = [&](Matrix<double>& m, const Matrix<double>& analytic) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double keep = m(r, c);
        m(r, c) = keep + eps;
        const double up = loss();
        m(r, c) = keep - eps;
        const double down = loss();
        m(r, c) = keep;
        const double numeric = (up - down) / (2 * eps);
        // central differences at eps=1e-6 carry ~1e-10 of roundoff
        const double tol = 1e-3 * std::max(std::abs(numeric), std::abs(analytic(r, c))) + 1e-9;
        EXPECT_LE(std::abs(numeric - analytic(r, c)), tol)
            << "row " << r << " col " << c << " numeric " << numeric << " analytic " << analytic(r, c);
      }
    }
  };
  check(support, res.support_grad);
  check(query, res.query_grad);
}

}  // namespace

TEST(ProtoNet, EpisodeGradientMatchesFiniteDifferences) { check_episode_gradient(false); }

TEST(ProtoNet, PerClassQueryGradientMatchesFiniteDifferences) { check_episode_gradient(true); }

TEST(ProtoNet, PerClassRowsReduceToSharedQueryWhenIdentical) {
  std::mt19937_64 rng(25);
  const Matrix<double> centroids = random_matrix(5, 6, rng);
  const Vector<double> q = random_matrix(6, 1, rng).col(0);
  Matrix<double> rows(5, 6);
  for (int k = 0; k < 5; ++k) rows.row(k) = q.transpose();
  const auto a = classify_query(q, centroids);
  const auto b = classify_query(rows, centroids);
  EXPECT_EQ(a.predicted, b.predicted);
  EXPECT_LT((a.distances - b.distances).cwiseAbs().maxCoeff(), 1e-12);
}
