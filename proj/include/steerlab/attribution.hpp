#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "steerlab/model.hpp"

namespace steerlab {

struct NeuronRef {
  int layer = 0;
  int neuron = 0;
  auto operator<=>(const NeuronRef&) const = default;
};

struct ActivationEntry {
  NeuronRef ref;
  double score = 0.0;  // A_N
  std::vector<Token> top_tokens;
};

/// Every neuron's normalized score for one token, sorted by score
/// descending, ties by (layer, neuron) ascending.
struct ActivationMap {
  Token token = 0;
  int k = 100;
  std::vector<ActivationEntry> entries;
};

inline constexpr int kDefaultTopK = 100;
inline constexpr int kStoredTopTokens = 10;

/// W_up * sigmoid(W_gate), elementwise; F x D.
RowMatrix<double> effective_weights(const ModelParams& params, int layer);

/// softmax(W_LM w + b_LM).
std::vector<double> decode_row(const ModelParams& params, std::span<const double> w);

/// P[t] divided by the mean of the k largest entries of P (k clamped to V).
/// The target is read unconditionally, even when outside the top k.
double normalized_score(std::span<const double> probs, Token t, int k = kDefaultTopK);

/// Scores every MLP neuron of every layer for token `t`. Decodes one layer
/// block at a time; never holds more than a block of logits.
ActivationMap scan_token(const ModelParams& params, Token t, int k = kDefaultTopK);

enum class AmplifyMode { add, set };

/// Edit of one neuron's mlp_hidden coordinate; nothing else is touched.
HookSet amplify_hook(const ModelConfig& config, NeuronRef ref, AmplifyMode mode, double amount);

/// CSV with header "layer,neuron,score,top_tokens"; top tokens are
/// tab-joined, quoted, and rendered with escape sequences for control bytes.
void write_activation_csv(const ActivationMap& map, std::ostream& out);

}  // namespace steerlab
