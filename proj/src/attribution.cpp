#include "steerlab/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace steerlab {

namespace {

constexpr Eigen::Index kScanBlock = 256;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void softmax_inplace(std::span<double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

std::vector<Token> top_tokens(std::span<const double> probs, int count) {
  std::vector<Token> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(count), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(), [&](Token a, Token b) {
    return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)] ||
           (probs[static_cast<std::size_t>(a)] == probs[static_cast<std::size_t>(b)] && a < b);
  });
  idx.resize(n);
  return idx;
}

std::string escape_token(Token t) {
  const std::string s = token_text(t);
  if (t == tok::kBos) return "<bos>";
  if (t == tok::kEos) return "<eos>";
  std::string out;
  for (unsigned char c : s) {
    switch (c) {
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      case '\\': out += "\\\\"; break;
      case '"': out += "\"\""; break;
      default:
        if (c < 0x20 || c >= 0x7f) {
          static constexpr char kHex[] = "0123456789abcdef";
          out += "\\x";
          out += kHex[c >> 4];
          out += kHex[c & 0xF];
        } else {
          out += static_cast<char>(c);
        }
    }
  }
  return out;
}

}  // namespace

RowMatrix<double> effective_weights(const ModelParams& params, int layer) {
  if (layer < 0 || layer >= params.config.num_layers)
    throw ModelError("effective_weights: layer out of range: " + std::to_string(layer));
  const auto& l = params.layers[static_cast<std::size_t>(layer)];
  const RowMatrix<double> up = l.w_up.cast<double>();
  const RowMatrix<double> gate = l.w_gate.cast<double>().unaryExpr([](double g) { return sigmoid(g); });
  return up.cwiseProduct(gate);
}

std::vector<double> decode_row(const ModelParams& params, std::span<const double> w) {
  if (static_cast<int>(w.size()) != params.config.hidden_dim) throw ModelError("decode_row: width mismatch");
  const Eigen::Map<const Eigen::VectorXd> wv(w.data(), static_cast<Eigen::Index>(w.size()));
  const Eigen::VectorXd logits = params.lm_head.cast<double>() * wv + params.lm_bias.cast<double>();
  std::vector<double> p(logits.data(), logits.data() + logits.size());
  softmax_inplace(p);
  return p;
}

double normalized_score(std::span<const double> probs, Token t, int k) {
  if (probs.empty()) throw ModelError("normalized_score: empty distribution");
  if (t < 0 || static_cast<std::size_t>(t) >= probs.size()) throw ModelError("normalized_score: token out of range");
  if (k < 1) throw ModelError("normalized_score: k must be >= 1");
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), probs.size());
  std::vector<double> sorted(probs.begin(), probs.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(kk - 1), sorted.end(),
                   std::greater<>());
  const double top_sum = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(kk), 0.0);
  if (!(top_sum > 0.0)) throw ModelError("normalized_score: degenerate all-zero distribution");
  return probs[static_cast<std::size_t>(t)] / (top_sum / static_cast<double>(kk));
}

ActivationMap scan_token(const ModelParams& params, Token t, int k) {
  const ModelConfig& cfg = params.config;
  if (t < 0 || t >= cfg.vocab_size) throw ModelError("scan_token: token out of vocabulary");
  ActivationMap map;
  map.token = t;
  map.k = k;
  const RowMatrix<double> lm_head = params.lm_head.cast<double>();
  const Eigen::RowVectorXd bias = params.lm_bias.cast<double>().transpose();
  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    const RowMatrix<double> eff = effective_weights(params, layer);
    for (Eigen::Index start = 0; start < eff.rows(); start += kScanBlock) {
      const Eigen::Index rows = std::min(kScanBlock, eff.rows() - start);
      RowMatrix<double> logits = eff.middleRows(start, rows) * lm_head.transpose();
      logits.rowwise() += bias;
      for (Eigen::Index r = 0; r < rows; ++r) {
        std::span<double> row(logits.row(r).data(), static_cast<std::size_t>(logits.cols()));
        softmax_inplace(row);
        ActivationEntry e;
        e.ref = {layer, static_cast<int>(start + r)};
        e.score = normalized_score(row, t, k);
        e.top_tokens = top_tokens(row, kStoredTopTokens);
        map.entries.push_back(std::move(e));
      }
    }
  }
  std::stable_sort(map.entries.begin(), map.entries.end(), [](const ActivationEntry& a, const ActivationEntry& b) {
    return a.score > b.score || (a.score == b.score && a.ref < b.ref);
  });
  return map;
}

HookSet amplify_hook(const ModelConfig& config, NeuronRef ref, AmplifyMode mode, double amount) {
  if (ref.layer < 0 || ref.layer >= config.num_layers)
    throw ModelError("amplify_hook: layer out of range: " + std::to_string(ref.layer));
  if (ref.neuron < 0 || ref.neuron >= config.ffn_dim)
    throw ModelError("amplify_hook: neuron out of range: " + std::to_string(ref.neuron));
  HookSet hooks;
  const TapSite site{ref.layer, SiteKind::mlp_hidden};
  if (mode == AmplifyMode::add)
    hooks.add_neuron(site, ref.neuron, amount);
  else
    hooks.set_neuron(site, ref.neuron, amount);
  return hooks;
}

void write_activation_csv(const ActivationMap& map, std::ostream& out) {
  out << "layer,neuron,score,top_tokens\n";
  out.precision(17);
  for (const auto& e : map.entries) {
    out << e.ref.layer << ',' << e.ref.neuron << ',' << e.score << ",\"";
    for (std::size_t i = 0; i < e.top_tokens.size(); ++i) {
      if (i) out << '\t';
      out << escape_token(e.top_tokens[i]);
    }
    out << "\"\n";
  }
}

}  // namespace steerlab
