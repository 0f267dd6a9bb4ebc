#include "steerlab/train.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace steerlab {

namespace {

using Mat = RowMatrix<double>;
using Vec = Vector<double>;

struct NormCache {
  Mat normalized;  // x * r (before gain)
  Vec inv_rms;  // r per row
};

NormCache rms_forward(const Mat& x) {
  NormCache c;
  c.inv_rms.resize(x.rows());
  c.normalized.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    c.inv_rms(i) = 1.0 / std::sqrt(x.row(i).squaredNorm() / static_cast<double>(x.cols()) + rms_norm_eps());
    c.normalized.row(i) = x.row(i) * c.inv_rms(i);
  }
  return c;
}

// Given d(loss)/d(y) for y = xhat * gain, accumulates d(gain) and returns d(x).
Mat rms_backward(const NormCache& c, const Vec& gain, const Mat& dy, Vec& dgain) {
  dgain += (dy.array() * c.normalized.array()).colwise().sum().transpose().matrix();
  Mat dx(dy.rows(), dy.cols());
  const double d = static_cast<double>(dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const Eigen::RowVectorXd dxn = dy.row(i).cwiseProduct(gain.transpose());
    const double proj = dxn.dot(c.normalized.row(i)) / d;
    dx.row(i) = c.inv_rms(i) * (dxn - proj * c.normalized.row(i));
  }
  return dx;
}

struct LayerCache {
  Mat x_in;
  NormCache norm1;
  Mat h1, q, k, v;
  std::vector<Mat> probs;  // per head, n x n
  Mat heads;
  Mat x_mid;
  NormCache norm2;
  Mat h2, gate_sig, up, hidden;
};

struct Forward {
  std::vector<LayerCache> layers;
  Mat x_out;
  Mat logits;
};

Forward run_forward(const WeightsT<double>& w, const TokenSeq& seq) {
  const ModelConfig& cfg = w.config;
  const auto n = static_cast<Eigen::Index>(seq.size());
  const int hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (n > cfg.max_seq_len) throw ModelError("training sequence longer than max_seq_len");

  Forward f;
  Mat x(n, cfg.hidden_dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Token t = seq[static_cast<std::size_t>(i)];
    if (t < 0 || t >= cfg.vocab_size) throw ModelError("token out of vocabulary: " + std::to_string(t));
    x.row(i) = w.token_embedding.row(t) + w.position_embedding.row(i);
  }
  f.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  for (int li = 0; li < cfg.num_layers; ++li) {
    const auto& lw = w.layers[static_cast<std::size_t>(li)];
    LayerCache& c = f.layers[static_cast<std::size_t>(li)];
    c.x_in = x;
    c.norm1 = rms_forward(x);
    c.h1 = c.norm1.normalized.array().rowwise() * lw.attn_norm.transpose().array();
    c.q = c.h1 * lw.wq.transpose();
    c.k = c.h1 * lw.wk.transpose();
    c.v = c.h1 * lw.wv.transpose();
    c.heads.resize(n, cfg.hidden_dim);
    c.probs.resize(static_cast<std::size_t>(cfg.num_heads));
    for (int h = 0; h < cfg.num_heads; ++h) {
      Mat s = (c.q.middleCols(h * hd, hd) * c.k.middleCols(h * hd, hd).transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          s(i, j) = std::exp(s(i, j) - mx);
          sum += s(i, j);
        }
        s.row(i).head(i + 1) /= sum;
        s.row(i).tail(n - i - 1).setZero();
      }
      c.heads.middleCols(h * hd, hd) = s * c.v.middleCols(h * hd, hd);
      c.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    x += c.heads * lw.wo.transpose();
    c.x_mid = x;
    c.norm2 = rms_forward(x);
    c.h2 = c.norm2.normalized.array().rowwise() * lw.mlp_norm.transpose().array();
    c.gate_sig = (c.h2 * lw.w_gate.transpose()).unaryExpr([](double g) { return 1.0 / (1.0 + std::exp(-g)); });
    c.up = c.h2 * lw.w_up.transpose();
    c.hidden = c.gate_sig.cwiseProduct(c.up);
    x += c.hidden * lw.w_down.transpose();
  }
  f.x_out = x;
  f.logits = x * w.lm_head.transpose();
  f.logits.rowwise() += w.lm_bias.transpose();
  return f;
}

// Softmax cross-entropy per predicting row; writes d(mean loss)/d(logits) if requested.
double ce_loss(const Mat& logits, const TokenSeq& seq, Mat* dlogits) {
  const auto n = logits.rows();
  const double count = static_cast<double>(n - 1);
  double loss = 0.0;
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp().matrix();
    const double sum = e.sum();
    const Token target = seq[static_cast<std::size_t>(i + 1)];
    loss += std::log(sum) - (logits(i, target) - mx);
    if (dlogits) {
      dlogits->row(i) = e / (sum * count);
      (*dlogits)(i, target) -= 1.0 / count;
    }
  }
  return loss / count;
}

}  // namespace

WeightsT<double> zeros_like(const WeightsT<double>& weights) {
  WeightsT<double> z = weights;
  for_each_tensor(z, [](std::string_view, auto& t) { t.setZero(); });
  return z;
}

std::vector<std::span<double>> tensor_spans(WeightsT<double>& weights) {
  std::vector<std::span<double>> out;
  for_each_tensor(weights, [&](std::string_view, auto& t) {
    out.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  });
  return out;
}

double sequence_loss(const WeightsT<double>& weights, const TokenSeq& seq) {
  if (seq.size() < 2) throw ModelError("training sequence needs at least 2 tokens");
  return ce_loss(run_forward(weights, seq).logits, seq, nullptr);
}

double sequence_loss_and_grad(const WeightsT<double>& w, const TokenSeq& seq, WeightsT<double>& g) {
  if (seq.size() < 2) throw ModelError("training sequence needs at least 2 tokens");
  const ModelConfig& cfg = w.config;
  const Forward f = run_forward(w, seq);
  Mat dlogits;
  const double loss = ce_loss(f.logits, seq, &dlogits);
  const auto n = static_cast<Eigen::Index>(seq.size());
  const int hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  g.lm_head.noalias() += dlogits.transpose() * f.x_out;
  g.lm_bias += dlogits.colwise().sum().transpose();
  Mat dx = dlogits * w.lm_head;

  for (int li = cfg.num_layers - 1; li >= 0; --li) {
    const auto& lw = w.layers[static_cast<std::size_t>(li)];
    auto& lg = g.layers[static_cast<std::size_t>(li)];
    const LayerCache& c = f.layers[static_cast<std::size_t>(li)];

    // MLP: x_out = x_mid + (sig(h2 Wg^T) * (h2 Wu^T)) Wd^T
    lg.w_down.noalias() += dx.transpose() * c.hidden;
    const Mat dhidden = dx * lw.w_down;
    const Mat dup = dhidden.cwiseProduct(c.gate_sig);
    const Mat dgate = (dhidden.array() * c.up.array() * c.gate_sig.array() * (1.0 - c.gate_sig.array())).matrix();
    lg.w_gate.noalias() += dgate.transpose() * c.h2;
    lg.w_up.noalias() += dup.transpose() * c.h2;
    const Mat dh2 = dgate * lw.w_gate + dup * lw.w_up;
    dx += rms_backward(c.norm2, lw.mlp_norm, dh2, lg.mlp_norm);

    // Attention: x_mid = x_in + heads Wo^T
    lg.wo.noalias() += dx.transpose() * c.heads;
    const Mat dheads = dx * lw.wo;
    Mat dq(n, cfg.hidden_dim), dk(n, cfg.hidden_dim), dv(n, cfg.hidden_dim);
    for (int h = 0; h < cfg.num_heads; ++h) {
      const Mat& p = c.probs[static_cast<std::size_t>(h)];
      const auto dout = dheads.middleCols(h * hd, hd);
      const Mat dp = dout * c.v.middleCols(h * hd, hd).transpose();
      dv.middleCols(h * hd, hd) = p.transpose() * dout;
      const Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
      const Mat ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * scale;
      dq.middleCols(h * hd, hd) = ds * c.k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd) = ds.transpose() * c.q.middleCols(h * hd, hd);
    }
    lg.wq.noalias() += dq.transpose() * c.h1;
    lg.wk.noalias() += dk.transpose() * c.h1;
    lg.wv.noalias() += dv.transpose() * c.h1;
    const Mat dh1 = dq * lw.wq + dk * lw.wk + dv * lw.wv;
    dx += rms_backward(c.norm1, lw.attn_norm, dh1, lg.attn_norm);
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    g.token_embedding.row(seq[static_cast<std::size_t>(i)]) += dx.row(i);
    g.position_embedding.row(i) += dx.row(i);
  }
  return loss;
}

TrainResult train_toy(const ModelConfig& config, const std::vector<TokenSeq>& corpus, const TrainOptions& options) {
  if (corpus.empty()) throw ModelError("train_toy: empty corpus");
  if (options.steps < 0) throw ModelError("train_toy: steps must be >= 0");
  if (options.batch_size < 1) throw ModelError("train_toy: batch_size must be >= 1");
  for (const auto& s : corpus) {
    if (s.size() < 2) throw ModelError("train_toy: every sequence needs at least 2 tokens");
    if (static_cast<int>(s.size()) > config.max_seq_len) throw ModelError("train_toy: sequence exceeds max_seq_len");
  }

  TrainResult result;
  const ModelParams init = init_params(config);
  if (options.steps == 0) {
    result.params = init;
    result.final_loss = std::numeric_limits<double>::quiet_NaN();
    return result;
  }

  WeightsT<double> w = cast_weights<double>(init);
  WeightsT<double> grad = zeros_like(w);
  WeightsT<double> m1 = zeros_like(w);
  WeightsT<double> m2 = zeros_like(w);
  auto ws = tensor_spans(w);
  auto gs = tensor_spans(grad);
  auto m1s = tensor_spans(m1);
  auto m2s = tensor_spans(m2);

  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);

  for (int step = 1; step <= options.steps; ++step) {
    for (auto& s : gs) std::fill(s.begin(), s.end(), 0.0);
    double batch_loss = 0.0;
    for (int b = 0; b < options.batch_size; ++b) batch_loss += sequence_loss_and_grad(w, corpus[pick(rng)], grad);
    batch_loss /= options.batch_size;
    if (!std::isfinite(batch_loss))
      throw ModelError("train_toy diverged: non-finite loss at step " + std::to_string(step));

    double sq = 0.0;
    for (auto& s : gs) {
      for (double& v : s) {
        v /= options.batch_size;
        sq += v * v;
      }
    }
    const double norm = std::sqrt(sq);
    const double clip = (options.grad_clip > 0.0 && norm > options.grad_clip) ? options.grad_clip / norm : 1.0;
    const double progress = options.steps > 1 ? static_cast<double>(step - 1) / (options.steps - 1) : 1.0;
    const double lr = options.learning_rate *
                      (options.final_lr_fraction +
                       (1.0 - options.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    const double bc1 = 1.0 - std::pow(kBeta1, step);
    const double bc2 = 1.0 - std::pow(kBeta2, step);
    for (std::size_t t = 0; t < ws.size(); ++t) {
      for (std::size_t i = 0; i < ws[t].size(); ++i) {
        const double gi = gs[t][i] * clip;
        m1s[t][i] = kBeta1 * m1s[t][i] + (1.0 - kBeta1) * gi;
        m2s[t][i] = kBeta2 * m2s[t][i] + (1.0 - kBeta2) * gi * gi;
        ws[t][i] -= lr * (m1s[t][i] / bc1) / (std::sqrt(m2s[t][i] / bc2) + kEps);
      }
    }
    result.loss_history.push_back(batch_loss);
    if (options.on_step) options.on_step(step, batch_loss);
  }

  const std::size_t window = std::min<std::size_t>(50, result.loss_history.size());
  double tail = 0.0;
  for (std::size_t i = result.loss_history.size() - window; i < result.loss_history.size(); ++i)
    tail += result.loss_history[i];
  result.final_loss = tail / static_cast<double>(window);
  result.params = cast_weights<float>(w);
  return result;
}

}  // namespace steerlab
