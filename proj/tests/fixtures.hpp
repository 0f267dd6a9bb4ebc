#pragma once

#include <random>

#include "steerlab/model.hpp"
#include "steerlab/tokenizer.hpp"

namespace steerlab::testing {

struct PlantedModel {
  ModelParams params;
  int layer = 0;
  int neuron = 0;
  Token target = tok::kFenceCpp;
};

// Random model with one neuron wired to a single token. The last residual
// coordinate r is reserved: only the target's (tied) embedding touches it,
// nothing reads it (zero norm gains, zero up/gate columns), and only the
// planted neuron writes it, with W_down[:, n] = 2 e_r. The planted neuron has
// W_up row 100 e_r and W_gate row 0, so its effective weights are 50 e_r
// and its natural activation is exactly 0.
inline PlantedModel planted_model(std::uint64_t seed = 7, Token target = tok::kFenceCpp, int num_layers = 2,
                                  int ffn_dim = 32, int neuron = 5) {
  ModelConfig cfg;
  cfg.num_layers = num_layers;
  cfg.hidden_dim = 32;
  cfg.num_heads = 4;
  cfg.ffn_dim = ffn_dim;
  cfg.vocab_size = tok::kMinVocab;
  cfg.max_seq_len = 64;
  cfg.seed = seed;
  PlantedModel pm{init_params(cfg), num_layers - 1, neuron, target};
  ModelParams& p = pm.params;
  const int r = cfg.hidden_dim - 1;

  p.token_embedding.col(r).setZero();
  p.token_embedding.row(target).setZero();
  p.token_embedding(target, r) = 1.0f;
  p.position_embedding.col(r).setZero();
  p.lm_head = p.token_embedding;
  p.lm_bias.setZero();
  for (auto& l : p.layers) {
    l.attn_norm(r) = 0.0f;
    l.mlp_norm(r) = 0.0f;
    l.wo.row(r).setZero();
    l.w_up.col(r).setZero();
    l.w_gate.col(r).setZero();
    l.w_down.row(r).setZero();
  }
  auto& l = p.layers[static_cast<std::size_t>(pm.layer)];
  l.w_up.row(neuron).setZero();
  l.w_up(neuron, r) = 100.0f;
  l.w_gate.row(neuron).setZero();
  l.w_down.col(neuron).setZero();
  l.w_down(r, neuron) = 2.0f;
  return pm;
}

inline TokenSeq random_prompt(std::mt19937_64& rng, int length) {
  std::uniform_int_distribution<Token> byte('a', 'z');
  TokenSeq t{tok::kBos};
  for (int i = 0; i < length; ++i) t.push_back(byte(rng));
  return t;
}

}  // namespace steerlab::testing
