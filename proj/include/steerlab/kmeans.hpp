#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "steerlab/model.hpp"

namespace steerlab {

class ClusteringError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KMeansResult {
  RowMatrix<double> centroids;  // C x dim
  std::vector<int> labels;
  double sse = 0.0;
  /// SSE after every assignment step, first entry from the seeding.
  std::vector<double> sse_history;
  int iterations = 0;
  bool converged = false;
};

/// Lloyd's algorithm from k-means++ seeding. Iterates until no label
/// changes, the largest centroid move is <= tol, or max_iter update steps.
/// An emptied cluster is reseeded to the point farthest from its stale
/// centroid. Ties in assignment go to the lowest centroid index.
KMeansResult kmeans(const RowMatrix<double>& points, int clusters, std::uint64_t seed, int max_iter = 300,
                    double tol = 0.0);

/// Index of the closest centroid (squared Euclidean), lowest index on ties.
int nearest_centroid(const RowMatrix<double>& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& point);

}  // namespace steerlab
