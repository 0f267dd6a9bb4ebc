#include "steerlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <utility>

namespace steerlab {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr std::int64_t kMaxDim = 1 << 20;
constexpr std::int64_t kMaxTensor = std::int64_t{1} << 31;

// y = x * g / sqrt(mean(x^2) + eps), row-wise.
Activations rms_norm(const Activations& x, const Vector<double>& gain) {
  Activations y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double inv = 1.0 / std::sqrt(x.row(r).squaredNorm() / static_cast<double>(x.cols()) + kRmsEps);
    y.row(r) = (x.row(r).array() * gain.transpose().array() * inv).matrix();
  }
  return y;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

double rms_norm_eps() { return kRmsEps; }

void ModelConfig::validate() const {
  if (num_layers < 0) throw ModelError("num_layers must be >= 0");
  if (hidden_dim < 1 || num_heads < 1 || ffn_dim < 1 || vocab_size < 1 || max_seq_len < 1)
    throw ModelError("model dimensions must be >= 1");
  for (std::int64_t d : {std::int64_t{num_layers}, std::int64_t{hidden_dim}, std::int64_t{num_heads},
                         std::int64_t{ffn_dim}, std::int64_t{vocab_size}, std::int64_t{max_seq_len}}) {
    if (d > kMaxDim) throw ModelError("model dimension overflow: " + std::to_string(d));
  }
  if (hidden_dim % num_heads != 0) throw ModelError("hidden_dim must be divisible by num_heads");
  if (vocab_size < tok::kMinVocab)
    throw ModelError("vocab_size must be at least " + std::to_string(tok::kMinVocab));
  const std::int64_t d = hidden_dim;
  for (std::int64_t rows : {std::int64_t{vocab_size}, std::int64_t{ffn_dim}, std::int64_t{max_seq_len}, d}) {
    if (rows * d > kMaxTensor) throw ModelError("model dimension overflow: tensor too large");
  }
}

std::string_view to_string(SiteKind kind) {
  switch (kind) {
    case SiteKind::post_attention: return "post_attention";
    case SiteKind::post_mlp: return "post_mlp";
    case SiteKind::mlp_hidden: return "mlp_hidden";
    case SiteKind::attn_output: return "attn_output";
  }
  return "?";
}

SiteKind site_kind_from_string(std::string_view name) {
  if (name == "post_attention") return SiteKind::post_attention;
  if (name == "post_mlp") return SiteKind::post_mlp;
  if (name == "mlp_hidden") return SiteKind::mlp_hidden;
  if (name == "attn_output") return SiteKind::attn_output;
  throw ModelError("unknown site kind: " + std::string(name));
}

int site_dim(const ModelConfig& config, SiteKind kind) {
  return kind == SiteKind::mlp_hidden ? config.ffn_dim : config.hidden_dim;
}

HookSet& HookSet::add_vector(TapSite site, Eigen::VectorXd v) {
  edits.push_back({site, AddVector{std::move(v)}});
  return *this;
}

HookSet& HookSet::set_neuron(TapSite site, int index, double value) {
  edits.push_back({site, SetNeuron{index, value}});
  return *this;
}

HookSet& HookSet::add_neuron(TapSite site, int index, double delta) {
  edits.push_back({site, AddNeuron{index, delta}});
  return *this;
}

void HookSet::validate(const ModelConfig& config) const {
  std::set<std::tuple<int, SiteKind, int>> set_targets;
  for (const auto& e : edits) {
    if (e.site.layer < 0 || e.site.layer >= config.num_layers)
      throw ModelError("hook layer out of range: " + std::to_string(e.site.layer));
    const int dim = site_dim(config, e.site.kind);
    std::visit(
        [&](const auto& edit) {
          using T = std::decay_t<decltype(edit)>;
          if constexpr (std::is_same_v<T, AddVector>) {
            if (edit.v.size() != dim)
              throw ModelError("hook site dimension mismatch: vector of " + std::to_string(edit.v.size()) +
                               " at site of width " + std::to_string(dim));
          } else {
            if (edit.index < 0 || edit.index >= dim)
              throw ModelError("hook neuron index out of range: " + std::to_string(edit.index));
            if constexpr (std::is_same_v<T, SetNeuron>) {
              if (!set_targets.emplace(e.site.layer, e.site.kind, edit.index).second)
                throw ModelError("duplicate set_neuron edit for one coordinate");
            }
          }
        },
        e.edit);
  }
}

void HookSet::apply(const TapSite& site, Activations& act) const {
  for (const auto& e : edits) {
    if (e.site != site) continue;
    std::visit(
        [&](const auto& edit) {
          using T = std::decay_t<decltype(edit)>;
          if constexpr (std::is_same_v<T, AddVector>) {
            act.rowwise() += edit.v.transpose();
          } else if constexpr (std::is_same_v<T, SetNeuron>) {
            act.col(edit.index).setConstant(edit.value);
          } else {
            act.col(edit.index).array() += edit.delta;
          }
        },
        e.edit);
  }
}

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  const int d = config.hidden_dim;
  const int f = config.ffn_dim;
  ModelParams p;
  p.config = config;
  p.token_embedding.resize(config.vocab_size, d);
  p.position_embedding.resize(config.max_seq_len, d);
  p.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& l : p.layers) {
    l.attn_norm = Vector<float>::Ones(d);
    l.wq.resize(d, d);
    l.wk.resize(d, d);
    l.wv.resize(d, d);
    l.wo.resize(d, d);
    l.mlp_norm = Vector<float>::Ones(d);
    l.w_gate.resize(f, d);
    l.w_up.resize(f, d);
    l.w_down.resize(d, f);
  }
  p.lm_head.resize(config.vocab_size, d);
  p.lm_bias = Vector<float>::Zero(config.vocab_size);

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  for_each_tensor(p, [&](std::string_view name, auto& t) {
    if (name == "attn_norm" || name == "mlp_norm" || name == "lm_bias") return;
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(normal(rng));
  });
  return p;
}

Transformer::Transformer(const ModelParams& params) : weights_(cast_weights<double>(params)) {
  weights_.config.validate();
}

ForwardOutput Transformer::run(const TokenSeq& tokens, const RunOptions& options) const {
  const ModelConfig& cfg = weights_.config;
  if (tokens.empty()) throw ModelError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw ModelError("context overflow: " + std::to_string(tokens.size()) + " tokens > max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  if (options.hooks) options.hooks->validate(cfg);
  for (const auto& s : options.taps) {
    if (s.layer < 0 || s.layer >= cfg.num_layers)
      throw ModelError("tap layer out of range: " + std::to_string(s.layer));
  }

  const auto n = static_cast<Eigen::Index>(tokens.size());
  const int d = cfg.hidden_dim;
  const int hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardOutput out;
  auto visit = [&](const TapSite& site, Activations& act) {
    if (options.hooks) options.hooks->apply(site, act);
    if (options.interceptor) options.interceptor(site, act);
    if (std::find(options.taps.begin(), options.taps.end(), site) != options.taps.end()) out.trace[site] = act;
  };

  Activations x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Token t = tokens[static_cast<std::size_t>(i)];
    if (t < 0 || t >= cfg.vocab_size) throw ModelError("token out of vocabulary: " + std::to_string(t));
    x.row(i) = weights_.token_embedding.row(t) + weights_.position_embedding.row(i);
  }

  Activations scores(n, n);
  for (int li = 0; li < cfg.num_layers; ++li) {
    const auto& w = weights_.layers[static_cast<std::size_t>(li)];
    const Activations h = rms_norm(x, w.attn_norm);
    const Activations q = h * w.wq.transpose();
    const Activations k = h * w.wk.transpose();
    const Activations v = h * w.wv.transpose();
    Activations heads(n, d);
    for (int hh = 0; hh < cfg.num_heads; ++hh) {
      const auto qh = q.middleCols(hh * hd, hd);
      const auto kh = k.middleCols(hh * hd, hd);
      scores.noalias() = (qh * kh.transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double mx = scores.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          scores(i, j) = std::exp(scores(i, j) - mx);
          sum += scores(i, j);
        }
        scores.row(i).head(i + 1) /= sum;
        scores.row(i).tail(n - i - 1).setZero();
      }
      heads.middleCols(hh * hd, hd).noalias() = scores * v.middleCols(hh * hd, hd);
    }
    Activations attn = heads * w.wo.transpose();
    visit({li, SiteKind::attn_output}, attn);
    x += attn;
    visit({li, SiteKind::post_attention}, x);

    const Activations h2 = rms_norm(x, w.mlp_norm);
    Activations hidden = h2 * w.w_gate.transpose();
    const Activations up = h2 * w.w_up.transpose();
    hidden = hidden.unaryExpr([](double g) { return sigmoid(g); }).cwiseProduct(up);
    visit({li, SiteKind::mlp_hidden}, hidden);
    x.noalias() += hidden * w.w_down.transpose();
    visit({li, SiteKind::post_mlp}, x);
  }

  if (options.all_logits) {
    out.logits = x * weights_.lm_head.transpose();
    out.logits.rowwise() += weights_.lm_bias.transpose();
  } else {
    out.logits = x.bottomRows(1) * weights_.lm_head.transpose();
    out.logits.row(0) += weights_.lm_bias.transpose();
  }
  return out;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<double> next_token_distribution(std::span<const double> logits, double temperature) {
  std::vector<double> p(logits.size(), 0.0);
  if (logits.empty()) return p;
  if (temperature <= 0.0) {
    p[argmax(logits)] = 1.0;
    return p;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

TokenSeq Transformer::generate(const TokenSeq& prompt, const GenerationSettings& settings,
                               const RunOptions& options) const {
  if (settings.temperature < 0.0) throw ModelError("temperature must be >= 0");
  if (settings.max_new_tokens < 1) throw ModelError("max_new_tokens must be >= 1");
  if (prompt.empty()) throw ModelError("generate: empty prompt");
  if (static_cast<int>(prompt.size()) + settings.max_new_tokens > weights_.config.max_seq_len)
    throw ModelError("context overflow: prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                     std::to_string(settings.max_new_tokens) + " new tokens exceeds max_seq_len " +
                     std::to_string(weights_.config.max_seq_len));

  RunOptions step_options = options;
  step_options.all_logits = false;
  std::mt19937_64 rng(settings.seed);
  TokenSeq seq = prompt;
  TokenSeq generated;
  for (int step = 0; step < settings.max_new_tokens; ++step) {
    const ForwardOutput fo = run(seq, step_options);
    const std::span<const double> last(fo.logits.data(), static_cast<std::size_t>(fo.logits.cols()));
    Token next = 0;
    if (settings.temperature == 0.0) {
      next = static_cast<Token>(argmax(last));
    } else {
      const std::vector<double> probs = next_token_distribution(last, settings.temperature);
      const double u = std::generate_canonical<double, 53>(rng);
      double cum = 0.0;
      // Falls back to the last nonzero entry if rounding leaves u >= total mass.
      for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        cum += probs[i];
        next = static_cast<Token>(i);
        if (u < cum) break;
      }
    }
    seq.push_back(next);
    generated.push_back(next);
    if (next == tok::kEos && settings.stop_at_eos) break;
  }
  return generated;
}

ForwardOutput forward(const ModelParams& params, const TokenSeq& tokens, std::span<const TapSite> taps,
                      const HookSet& hooks) {
  RunOptions options;
  options.taps.assign(taps.begin(), taps.end());
  options.hooks = &hooks;
  return Transformer(params).run(tokens, options);
}

TokenSeq generate(const ModelParams& params, const TokenSeq& prompt, const GenerationSettings& settings,
                  const HookSet& hooks) {
  RunOptions options;
  options.hooks = &hooks;
  return Transformer(params).generate(prompt, settings, options);
}

}  // namespace steerlab
