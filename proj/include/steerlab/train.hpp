#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "steerlab/model.hpp"

namespace steerlab {

struct TrainOptions {
  int steps = 2000;
  double learning_rate = 3e-3;
  /// Cosine decay from learning_rate down to learning_rate * final_lr_fraction.
  double final_lr_fraction = 0.1;
  std::uint64_t seed = 0;
  int batch_size = 8;
  /// Global gradient-norm clip; <= 0 disables.
  double grad_clip = 1.0;
  /// Invoked after every optimizer step with the batch-mean loss.
  std::function<void(int step, double loss)> on_step;
};

struct TrainResult {
  ModelParams params;
  /// Mean batch loss over the last min(50, steps) steps; NaN when steps == 0.
  double final_loss = 0.0;
  std::vector<double> loss_history;
};

/// Next-token cross-entropy language-model training with Adam, starting
/// from init_params(config). Batches are drawn with an RNG seeded by
/// options.seed, so the result is bit-reproducible.
TrainResult train_toy(const ModelConfig& config, const std::vector<TokenSeq>& corpus, const TrainOptions& options);

/// Mean next-token cross-entropy of one sequence (positions 0..n-2 predict 1..n-1).
double sequence_loss(const WeightsT<double>& weights, const TokenSeq& seq);

/// Same loss, accumulating d(loss)/d(weights) into `grad` (which must be
/// shaped like `weights`; it is not zeroed here).
double sequence_loss_and_grad(const WeightsT<double>& weights, const TokenSeq& seq, WeightsT<double>& grad);

/// Weights of the same shape with every entry zero.
WeightsT<double> zeros_like(const WeightsT<double>& weights);

/// Flat views of every tensor in declaration order.
std::vector<std::span<double>> tensor_spans(WeightsT<double>& weights);

}  // namespace steerlab
