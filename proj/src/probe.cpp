#include "steerlab/probe.hpp"

#include <cmath>

namespace steerlab {

LinearProbe LinearProbe::zeros(int classes, int dim) {
  if (classes < 1 || dim < 1) throw ModelError("probe: classes and dim must be positive");
  return {RowMatrix<double>::Zero(classes, dim), Eigen::VectorXd::Zero(classes)};
}

Eigen::VectorXd LinearProbe::logits(const Eigen::Ref<const Eigen::VectorXd>& h) const {
  if (h.size() != weight.cols())
    throw ModelError("probe: input has " + std::to_string(h.size()) + " entries, expected " +
                     std::to_string(weight.cols()));
  return weight * h + bias;
}

int LinearProbe::predict(const Eigen::Ref<const Eigen::VectorXd>& h) const {
  const Eigen::VectorXd z = logits(h);
  return static_cast<int>(argmax(std::span<const double>(z.data(), static_cast<std::size_t>(z.size()))));
}

double probe_loss(const LinearProbe& probe, const RowMatrix<double>& x, std::span<const int> labels,
                  LinearProbe* grad) {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw ModelError("probe_loss: label count mismatch");
  if (x.rows() == 0) throw ModelError("probe_loss: empty dataset");
  if (x.cols() != probe.weight.cols()) throw ModelError("probe_loss: dimension mismatch");
  RowMatrix<double> z = x * probe.weight.transpose();
  z.rowwise() += probe.bias.transpose();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= probe.classes()) throw ModelError("probe_loss: label out of range");
    const double mx = z.row(i).maxCoeff();
    auto row = z.row(i);
    row.array() = (row.array() - mx).exp();
    const double sum = row.sum();
    loss += std::log(sum) - std::log(row(y));
    row /= sum;
    row(y) -= 1.0;  // z now holds softmax - onehot
  }
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  if (grad) {
    grad->weight = z.transpose() * x * inv_n;
    grad->bias = z.colwise().sum().transpose() * inv_n;
  }
  return loss * inv_n;
}

double default_probe_step(const RowMatrix<double>& x) {
  const double max_sq = x.rows() > 0 ? x.rowwise().squaredNorm().maxCoeff() : 0.0;
  return 1.0 / (0.5 * (max_sq + 1.0));
}

ProbeFit train_probe(const RowMatrix<double>& x, std::span<const int> labels, int classes,
                     const ProbeTrainOptions& options) {
  if (x.rows() == 0) throw ModelError("train_probe: empty dataset");
  if (!x.allFinite()) throw ModelError("train_probe: non-finite input");
  const double lr = options.learning_rate > 0.0 ? options.learning_rate : default_probe_step(x);
  ProbeFit fit{LinearProbe::zeros(classes, static_cast<int>(x.cols())), 0, 0.0};
  LinearProbe grad;
  double loss = probe_loss(fit.probe, x, labels, &grad);
  for (int it = 0; it < options.max_iter; ++it) {
    fit.probe.weight -= lr * grad.weight;
    fit.probe.bias -= lr * grad.bias;
    ++fit.iterations;
    const double next = probe_loss(fit.probe, x, labels, &grad);
    if (!std::isfinite(next)) throw ModelError("train_probe: loss diverged");
    const double improvement = loss - next;
    loss = next;
    if (improvement < options.tol) break;
  }
  fit.final_loss = loss;
  return fit;
}

}  // namespace steerlab
