#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "steerlab/tokenizer.hpp"

namespace steerlab {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Activations at one tap site: one row per token position.
using Activations = RowMatrix<double>;

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int num_layers = 2;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  int vocab_size = 520;
  int max_seq_len = 192;
  std::uint64_t seed = 0;

  int head_dim() const { return hidden_dim / num_heads; }
  /// Throws ModelError on inconsistent or oversized shapes.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct LayerWeightsT {
  Vector<S> attn_norm;  // D
  RowMatrix<S> wq, wk, wv, wo;  // D x D, (out, in)
  Vector<S> mlp_norm;  // D
  RowMatrix<S> w_gate;  // F x D
  RowMatrix<S> w_up;  // F x D
  RowMatrix<S> w_down;  // D x F
};

template <typename S>
struct WeightsT {
  ModelConfig config;
  RowMatrix<S> token_embedding;  // V x D
  RowMatrix<S> position_embedding;  // max_seq_len x D
  std::vector<LayerWeightsT<S>> layers;
  RowMatrix<S> lm_head;  // V x D
  Vector<S> lm_bias;  // V
};

/// Visits every tensor in checkpoint declaration order.
template <typename W, typename Fn>
void for_each_tensor(W& w, Fn&& fn) {
  fn(std::string_view("token_embedding"), w.token_embedding);
  fn(std::string_view("position_embedding"), w.position_embedding);
  for (auto& layer : w.layers) {
    fn(std::string_view("attn_norm"), layer.attn_norm);
    fn(std::string_view("wq"), layer.wq);
    fn(std::string_view("wk"), layer.wk);
    fn(std::string_view("wv"), layer.wv);
    fn(std::string_view("wo"), layer.wo);
    fn(std::string_view("mlp_norm"), layer.mlp_norm);
    fn(std::string_view("w_gate"), layer.w_gate);
    fn(std::string_view("w_up"), layer.w_up);
    fn(std::string_view("w_down"), layer.w_down);
  }
  fn(std::string_view("lm_head"), w.lm_head);
  fn(std::string_view("lm_bias"), w.lm_bias);
}

template <typename To, typename From>
WeightsT<To> cast_weights(const WeightsT<From>& src) {
  WeightsT<To> dst;
  dst.config = src.config;
  dst.token_embedding = src.token_embedding.template cast<To>();
  dst.position_embedding = src.position_embedding.template cast<To>();
  dst.layers.reserve(src.layers.size());
  for (const auto& l : src.layers) {
    LayerWeightsT<To> o;
    o.attn_norm = l.attn_norm.template cast<To>();
    o.wq = l.wq.template cast<To>();
    o.wk = l.wk.template cast<To>();
    o.wv = l.wv.template cast<To>();
    o.wo = l.wo.template cast<To>();
    o.mlp_norm = l.mlp_norm.template cast<To>();
    o.w_gate = l.w_gate.template cast<To>();
    o.w_up = l.w_up.template cast<To>();
    o.w_down = l.w_down.template cast<To>();
    dst.layers.push_back(std::move(o));
  }
  dst.lm_head = src.lm_head.template cast<To>();
  dst.lm_bias = src.lm_bias.template cast<To>();
  return dst;
}

/// Stored parameters (32-bit). Immutable once built.
using ModelParams = WeightsT<float>;

enum class SiteKind { post_attention, post_mlp, mlp_hidden, attn_output };

std::string_view to_string(SiteKind kind);
SiteKind site_kind_from_string(std::string_view name);

struct TapSite {
  int layer = 0;
  SiteKind kind = SiteKind::post_mlp;
  auto operator<=>(const TapSite&) const = default;
};

/// Width of the activation vector recorded at a site.
int site_dim(const ModelConfig& config, SiteKind kind);

struct AddVector {
  Eigen::VectorXd v;
};
struct SetNeuron {
  int index = 0;
  double value = 0.0;
};
struct AddNeuron {
  int index = 0;
  double delta = 0.0;
};
using HookEdit = std::variant<AddVector, SetNeuron, AddNeuron>;

struct HookSet {
  struct Entry {
    TapSite site;
    HookEdit edit;
  };
  std::vector<Entry> edits;

  HookSet& add_vector(TapSite site, Eigen::VectorXd v);
  HookSet& set_neuron(TapSite site, int index, double value);
  HookSet& add_neuron(TapSite site, int index, double delta);

  bool empty() const { return edits.empty(); }
  void validate(const ModelConfig& config) const;
  /// Applies the edits registered for `site`, in insertion order, to every row.
  void apply(const TapSite& site, Activations& act) const;
};

using ForwardTrace = std::map<TapSite, Activations>;

/// Called at every tap site after static hooks; may edit activations in place.
using SiteInterceptor = std::function<void(const TapSite&, Activations&)>;

struct RunOptions {
  std::vector<TapSite> taps;
  const HookSet* hooks = nullptr;
  SiteInterceptor interceptor;
  /// When false, only the final position's logits are computed.
  bool all_logits = true;
};

struct ForwardOutput {
  RowMatrix<double> logits;  // positions x V (1 x V when !all_logits)
  ForwardTrace trace;
};

struct GenerationSettings {
  double temperature = 1.0;
  int max_new_tokens = 1;
  std::uint64_t seed = 0;
  /// When false, generation runs the full max_new_tokens (fixed-work timing).
  bool stop_at_eos = true;
};

ModelParams init_params(const ModelConfig& config);

/// Forward pass over double-precision copies of the weights. Thread-safe:
/// a Transformer is immutable after construction.
class Transformer {
 public:
  explicit Transformer(const ModelParams& params);

  const ModelConfig& config() const { return weights_.config; }
  const WeightsT<double>& weights() const { return weights_; }

  ForwardOutput run(const TokenSeq& tokens, const RunOptions& options = {}) const;

  /// Autoregressive sampling. The output excludes the prompt and includes
  /// the end-of-sequence token when one is produced.
  TokenSeq generate(const TokenSeq& prompt, const GenerationSettings& settings,
                    const RunOptions& options = {}) const;

 private:
  WeightsT<double> weights_;
};

ForwardOutput forward(const ModelParams& params, const TokenSeq& tokens,
                      std::span<const TapSite> taps = {}, const HookSet& hooks = {});

std::vector<double> next_token_distribution(std::span<const double> logits, double temperature);

TokenSeq generate(const ModelParams& params, const TokenSeq& prompt,
                  const GenerationSettings& settings, const HookSet& hooks = {});

/// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> values);

double rms_norm_eps();

}  // namespace steerlab
