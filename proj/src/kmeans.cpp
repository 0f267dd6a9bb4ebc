#include "steerlab/kmeans.hpp"

#include <limits>
#include <random>

namespace steerlab {

namespace {

// Returns true if any label changed.
bool assign(const RowMatrix<double>& points, const RowMatrix<double>& centroids, std::vector<int>& labels,
            double& sse) {
  bool changed = false;
  sse = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int k = nearest_centroid(centroids, points.row(i));
    sse += (points.row(i) - centroids.row(k)).squaredNorm();
    if (labels[static_cast<std::size_t>(i)] != k) {
      labels[static_cast<std::size_t>(i)] = k;
      changed = true;
    }
  }
  return changed;
}

RowMatrix<double> plus_plus_seed(const RowMatrix<double>& points, int clusters, std::mt19937_64& rng) {
  const Eigen::Index n = points.rows();
  RowMatrix<double> centroids(clusters, points.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centroids.row(0) = points.row(first(rng));
  Eigen::VectorXd dist(n);
  for (Eigen::Index i = 0; i < n; ++i) dist(i) = (points.row(i) - centroids.row(0)).squaredNorm();
  for (int c = 1; c < clusters; ++c) {
    const double total = dist.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      const double u = std::generate_canonical<double, 53>(rng) * total;
      double cum = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (dist(i) <= 0.0) continue;
        cum += dist(i);
        pick = i;
        if (u < cum) break;
      }
    } else {
      pick = first(rng);
    }
    centroids.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) dist(i) = std::min(dist(i), (points.row(i) - centroids.row(c)).squaredNorm());
  }
  return centroids;
}

}  // namespace

int nearest_centroid(const RowMatrix<double>& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& point) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const double d = (point - centroids.row(k)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

KMeansResult kmeans(const RowMatrix<double>& points, int clusters, std::uint64_t seed, int max_iter, double tol) {
  if (clusters < 1) throw ClusteringError("kmeans: cluster count must be >= 1");
  if (points.rows() < clusters)
    throw ClusteringError("kmeans: " + std::to_string(clusters) + " clusters requested for " +
                          std::to_string(points.rows()) + " points");
  if (!points.allFinite()) throw ClusteringError("kmeans: non-finite input");

  std::mt19937_64 rng(seed);
  KMeansResult r;
  r.centroids = plus_plus_seed(points, clusters, rng);
  r.labels.assign(static_cast<std::size_t>(points.rows()), -1);
  double sse = 0.0;
  assign(points, r.centroids, r.labels, sse);
  r.sse_history.push_back(sse);

  for (int it = 0; it < max_iter; ++it) {
    RowMatrix<double> next = RowMatrix<double>::Zero(clusters, points.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(clusters), 0);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      const int k = r.labels[static_cast<std::size_t>(i)];
      next.row(k) += points.row(i);
      ++counts[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < clusters; ++k) {
      if (counts[static_cast<std::size_t>(k)] > 0) {
        next.row(k) /= static_cast<double>(counts[static_cast<std::size_t>(k)]);
        continue;
      }
      Eigen::Index far = 0;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < points.rows(); ++i) {
        const double d = (points.row(i) - r.centroids.row(k)).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      next.row(k) = points.row(far);
    }
    double movement = 0.0;
    for (int k = 0; k < clusters; ++k) movement = std::max(movement, (next.row(k) - r.centroids.row(k)).norm());
    r.centroids = std::move(next);
    ++r.iterations;
    const bool changed = assign(points, r.centroids, r.labels, sse);
    r.sse_history.push_back(sse);
    if (!changed) {
      r.converged = true;
      break;
    }
    if (movement <= tol) break;
  }
  r.sse = sse;
  return r;
}

}  // namespace steerlab
