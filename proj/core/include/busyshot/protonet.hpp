#pragma once

// Prototypical classification: per-class mean embeddings, squared Euclidean
// distances, softmax over negative distances, negative log-likelihood.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "busyshot/errors.hpp"

namespace busyshot {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct BasicClassScores {
  Vector<T> distances;      // squared Euclidean, one per class
  Vector<T> probabilities;  // softmax(-distances)
  int predicted = 0;        // argmax, lowest index on ties
};

using ClassScores = BasicClassScores<double>;

inline constexpr double kProbabilityFloor = 1e-12;

/// Row k is the mean of the rows of support[k].
template <typename T>
Matrix<T> class_centroids(std::span<const Matrix<T>> support) {
  if (support.empty()) throw ConfigError("no support classes");
  const Eigen::Index dim = support.front().cols();
  Matrix<T> centroids(static_cast<Eigen::Index>(support.size()), dim);
  for (std::size_t k = 0; k < support.size(); ++k) {
    const Matrix<T>& s = support[k];
    if (s.rows() == 0) throw ConfigError("support class " + std::to_string(k) + " is empty");
    if (s.cols() != dim) throw ShapeError("support embeddings differ in dimension");
    centroids.row(static_cast<Eigen::Index>(k)) = s.colwise().mean();
  }
  return centroids;
}

/// Numerically stable softmax of -distances.
template <typename T>
Vector<T> softmax_of_negative(const Vector<T>& distances) {
  const T lowest = distances.minCoeff();
  Vector<T> p = (-(distances.array() - lowest)).exp().matrix();
  return p / p.sum();
}

template <typename T>
BasicClassScores<T> scores_from_distances(Vector<T> distances) {
  BasicClassScores<T> s;
  s.probabilities = softmax_of_negative(distances);
  s.distances = std::move(distances);
  // smallest distance wins; strict comparison keeps the lowest index on ties
  int best = 0;
  for (Eigen::Index k = 1; k < s.distances.size(); ++k) {
    if (s.distances(k) < s.distances(best)) best = static_cast<int>(k);
  }
  s.predicted = best;
  return s;
}

/// One shared query embedding scored against every centroid.
template <typename T>
BasicClassScores<T> classify_query(const Vector<T>& query, const Matrix<T>& centroids) {
  if (query.size() != centroids.cols()) {
    throw ShapeError("query dimension " + std::to_string(query.size()) +
                     " does not match centroid dimension " + std::to_string(centroids.cols()));
  }
  Vector<T> d(centroids.rows());
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    d(k) = (centroids.row(k).transpose() - query).squaredNorm();
  }
  return scores_from_distances(std::move(d));
}

/// Row k of `per_class_queries` is the query encoded for class k, scored against centroid k.
template <typename T>
BasicClassScores<T> classify_query(const Matrix<T>& per_class_queries, const Matrix<T>& centroids) {
  if (per_class_queries.rows() != centroids.rows() || per_class_queries.cols() != centroids.cols()) {
    throw ShapeError("per-class query matrix must match the centroid matrix shape");
  }
  Vector<T> d(centroids.rows());
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    d(k) = (per_class_queries.row(k) - centroids.row(k)).squaredNorm();
  }
  return scores_from_distances(std::move(d));
}

/// -log p(true_class), with p floored at kProbabilityFloor.
template <typename T>
T nll_loss(const BasicClassScores<T>& scores, int true_class) {
  if (true_class < 0 || true_class >= scores.distances.size()) {
    throw std::out_of_range("class index " + std::to_string(true_class) + " outside [0, " +
                            std::to_string(scores.distances.size()) + ")");
  }
  const T lowest = scores.distances.minCoeff();
  const T lse = std::log((-(scores.distances.array() - lowest)).exp().sum()) - lowest;
  const T log_p = -scores.distances(true_class) - lse;
  return -std::max(log_p, static_cast<T>(std::log(kProbabilityFloor)));
}

template <typename T>
struct EpisodeLoss {
  T loss = T(0);              // mean NLL over queries
  int correct = 0;
  Matrix<T> support_grad;     // d loss / d support embedding, same layout as input
  Matrix<T> query_grad;       // d loss / d query embedding, same layout as input
  std::vector<BasicClassScores<T>> scores;
};

/// ProtoNet episode objective and its gradient.
///
/// `support` holds ways * shots rows, class-major (row k * shots + i).
/// Without per-class queries `queries` has one row per query; with them it
/// has ways rows per query (row q * ways + k is query q encoded for class k).
template <typename T>
EpisodeLoss<T> episode_loss(const Matrix<T>& support, int ways, int shots, const Matrix<T>& queries,
                            std::span<const int> labels, bool per_class_queries) {
  if (ways < 1 || shots < 1 || support.rows() != static_cast<Eigen::Index>(ways) * shots) {
    throw ShapeError("support matrix does not hold ways * shots rows");
  }
  const Eigen::Index per_query = per_class_queries ? ways : 1;
  if (queries.rows() != static_cast<Eigen::Index>(labels.size()) * per_query ||
      queries.cols() != support.cols()) {
    throw ShapeError("query matrix does not match labels / embedding dimension");
  }
  Matrix<T> centroids(ways, support.cols());
  for (int k = 0; k < ways; ++k) {
    centroids.row(k) = support.middleRows(static_cast<Eigen::Index>(k) * shots, shots).colwise().mean();
  }

  EpisodeLoss<T> out;
  out.query_grad = Matrix<T>::Zero(queries.rows(), queries.cols());
  Matrix<T> centroid_grad = Matrix<T>::Zero(ways, support.cols());
  const T inv_q = T(1) / static_cast<T>(labels.size());
  for (std::size_t q = 0; q < labels.size(); ++q) {
    const int label = labels[q];
    BasicClassScores<T> scores =
        per_class_queries
            ? classify_query<T>(Matrix<T>(queries.middleRows(static_cast<Eigen::Index>(q) * ways, ways)),
                                centroids)
            : classify_query<T>(Vector<T>(queries.row(static_cast<Eigen::Index>(q)).transpose()),
                                centroids);
    out.loss += nll_loss(scores, label) * inv_q;
    if (scores.predicted == label) ++out.correct;
    for (int k = 0; k < ways; ++k) {
      const T dl_dd = ((k == label) ? T(1) : T(0)) - scores.probabilities(k);
      const Eigen::Index row = per_class_queries ? static_cast<Eigen::Index>(q) * ways + k
                                                 : static_cast<Eigen::Index>(q);
      const auto diff = (queries.row(row) - centroids.row(k)).eval();
      out.query_grad.row(row) += (T(2) * dl_dd * inv_q) * diff;
      centroid_grad.row(k) -= (T(2) * dl_dd * inv_q) * diff;
    }
    out.scores.push_back(std::move(scores));
  }
  out.support_grad.resize(support.rows(), support.cols());
  for (int k = 0; k < ways; ++k) {
    for (int i = 0; i < shots; ++i) {
      out.support_grad.row(static_cast<Eigen::Index>(k) * shots + i) =
          centroid_grad.row(k) / static_cast<T>(shots);
    }
  }
  return out;
}

}  // namespace busyshot
