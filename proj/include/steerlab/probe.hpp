#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "steerlab/model.hpp"

namespace steerlab {

/// Multinomial logistic regression: z = W h + b.
struct LinearProbe {
  RowMatrix<double> weight;  // C x dim
  Eigen::VectorXd bias;      // C

  static LinearProbe zeros(int classes, int dim);

  int classes() const { return static_cast<int>(weight.rows()); }
  int dim() const { return static_cast<int>(weight.cols()); }

  Eigen::VectorXd logits(const Eigen::Ref<const Eigen::VectorXd>& h) const;
  /// argmax of the logits, lowest index on ties.
  int predict(const Eigen::Ref<const Eigen::VectorXd>& h) const;
};

struct ProbeTrainOptions {
  /// Step size; <= 0 picks 1 / (0.5 * max_i(|x_i|^2 + 1)), which bounds the
  /// curvature of the mean cross-entropy.
  double learning_rate = 0.0;
  int max_iter = 10000;
  double tol = 1e-6;
};

struct ProbeFit {
  LinearProbe probe;
  int iterations = 0;
  double final_loss = 0.0;
};

/// Mean cross-entropy over the rows of x. When `grad` is non-null it is
/// overwritten with d(loss)/d(probe): (softmax(z) - onehot) h^T averaged.
double probe_loss(const LinearProbe& probe, const RowMatrix<double>& x, std::span<const int> labels,
                  LinearProbe* grad = nullptr);

/// Full-batch gradient descent from zero weights. Stops when one step
/// improves the loss by less than tol, or after max_iter steps.
ProbeFit train_probe(const RowMatrix<double>& x, std::span<const int> labels, int classes,
                     const ProbeTrainOptions& options = {});

/// Step size used when ProbeTrainOptions::learning_rate is not positive.
double default_probe_step(const RowMatrix<double>& x);

}  // namespace steerlab
