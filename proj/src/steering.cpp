#include "steerlab/steering.hpp"

#include <cmath>
#include <memory>

#include "parallel.hpp"
#include "steerlab/evaluation.hpp"

namespace steerlab {

namespace {

void check_layer(const SteeringModel& model, int layer) {
  if (layer < 0 || layer >= model.num_layers)
    throw SteeringError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(model.num_layers) + ")");
}

RowMatrix<double> reduce_site(const ForwardTrace& trace, int num_layers, SiteKind site, std::size_t answer_start,
                              Reduction reduction) {
  RowMatrix<double> out;
  for (int l = 0; l < num_layers; ++l) {
    const Activations& act = trace.at({l, site});
    const auto rows = act.rows() - static_cast<Eigen::Index>(answer_start);
    const RowMatrix<float> answer = act.bottomRows(rows).cast<float>();
    const Eigen::VectorXd v = reduce_rows(answer, reduction);
    if (l == 0) out.resize(num_layers, v.size());
    out.row(l) = v.transpose();
  }
  return out;
}

}  // namespace

std::string_view to_string(Reduction r) {
  return r == Reduction::final_token ? "final_token" : "mean_answer_tokens";
}

Reduction reduction_from_string(std::string_view name) {
  if (name == "final_token") return Reduction::final_token;
  if (name == "mean_answer_tokens") return Reduction::mean_answer_tokens;
  throw SteeringError("unknown reduction: " + std::string(name));
}

RowMatrix<double> DiffSet::flattened() const {
  RowMatrix<double> out(static_cast<Eigen::Index>(deltas.size()), static_cast<Eigen::Index>(num_layers) * dim);
  for (std::size_t i = 0; i < deltas.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(deltas[i].data(), out.cols());
  return out;
}

RowMatrix<double> DiffSet::layer(int l) const {
  if (l < 0 || l >= num_layers) throw SteeringError("DiffSet::layer: layer out of range");
  RowMatrix<double> out(static_cast<Eigen::Index>(deltas.size()), dim);
  for (std::size_t i = 0; i < deltas.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = deltas[i].row(l);
  return out;
}

void DiffSet::validate() const {
  if (num_layers < 1 || dim < 1) throw SteeringError("DiffSet: non-positive shape");
  if (ids.size() != deltas.size()) throw SteeringError("DiffSet: id count does not match delta count");
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (deltas[i].rows() != num_layers || deltas[i].cols() != dim)
      throw SteeringError("DiffSet: delta " + ids[i] + " has wrong shape");
    if (!deltas[i].allFinite()) throw SteeringError("DiffSet: delta " + ids[i] + " is not finite");
  }
}

Eigen::VectorXd reduce_rows(const RowMatrix<float>& rows, Reduction reduction) {
  if (rows.rows() == 0) throw SteeringError("empty answer: no answer positions to reduce");
  if (reduction == Reduction::final_token) return rows.row(rows.rows() - 1).cast<double>().transpose();
  return rows.cast<double>().colwise().sum().transpose() / static_cast<double>(rows.rows());
}

RowMatrix<double> extract_answer_activations(const Transformer& model, std::string_view question,
                                             std::string_view answer, SiteKind site, Reduction reduction) {
  const ModelConfig& cfg = model.config();
  const std::size_t answer_start = render_prompt_tokens(question).size();
  const TokenSeq tokens = render_pair_tokens(question, answer);
  if (tokens.size() == answer_start) throw SteeringError("empty answer after tokenization");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw ModelError("context overflow: " + std::to_string(tokens.size()) + " tokens exceed max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  RunOptions options;
  options.all_logits = false;
  for (int l = 0; l < cfg.num_layers; ++l) options.taps.push_back({l, site});
  const ForwardOutput fo = model.run(tokens, options);
  return reduce_site(fo.trace, cfg.num_layers, site, answer_start, reduction);
}

PairActivations extract_pair_activations(const Transformer& model, std::string_view question,
                                         std::string_view positive, std::string_view negative, SiteKind site,
                                         Reduction reduction) {
  return {extract_answer_activations(model, question, positive, site, reduction),
          extract_answer_activations(model, question, negative, site, reduction)};
}

PairActivations extract_pair_activations(const Transformer& model, const PromptPair& pair, SiteKind site,
                                         Reduction reduction) {
  return extract_pair_activations(model, pair.question, pair.positive, pair.negative, site, reduction);
}

DiffSet diff_vectors(const Transformer& model, const std::vector<PromptPair>& pairs, SiteKind site,
                     Reduction reduction, int threads) {
  if (pairs.empty()) throw SteeringError("diff_vectors: no prompt pairs");
  DiffSet d;
  d.site = site;
  d.reduction = reduction;
  d.num_layers = model.config().num_layers;
  d.dim = site_dim(model.config(), site);
  d.deltas.resize(pairs.size());
  for (const auto& p : pairs) d.ids.push_back(p.id);
  detail::parallel_for(pairs.size(), threads, [&](std::size_t i) {
    const PairActivations a = extract_pair_activations(model, pairs[i], site, reduction);
    d.deltas[i] = a.positive - a.negative;
  });
  d.validate();
  return d;
}

std::vector<double> layer_norm_profile(const DiffSet& diffs) {
  if (diffs.deltas.empty()) throw SteeringError("layer_norm_profile: empty DiffSet");
  std::vector<double> out(static_cast<std::size_t>(diffs.num_layers), 0.0);
  for (const auto& d : diffs.deltas)
    for (int l = 0; l < diffs.num_layers; ++l) out[static_cast<std::size_t>(l)] += d.row(l).norm();
  for (double& v : out) v /= static_cast<double>(diffs.deltas.size());
  return out;
}

RowMatrix<double> SteeringModel::flat_centroids() const {
  RowMatrix<double> out(clusters, static_cast<Eigen::Index>(num_layers) * dim);
  for (int l = 0; l < num_layers; ++l) out.middleCols(static_cast<Eigen::Index>(l) * dim, dim) = centroids[l];
  return out;
}

void SteeringModel::validate() const {
  if (clusters < 1 || num_layers < 1 || dim < 1) throw SteeringError("SteeringModel: non-positive shape");
  if (centroids.size() != static_cast<std::size_t>(num_layers) || probes.size() != centroids.size())
    throw SteeringError("SteeringModel: per-layer tensor count does not match layer count");
  if (!std::isfinite(alpha)) throw SteeringError("SteeringModel: alpha is not finite");
  for (int l = 0; l < num_layers; ++l) {
    const auto& c = centroids[static_cast<std::size_t>(l)];
    const auto& p = probes[static_cast<std::size_t>(l)];
    if (c.rows() != clusters || c.cols() != dim) throw SteeringError("SteeringModel: centroid shape mismatch");
    if (!c.allFinite()) throw SteeringError("SteeringModel: centroids are not finite");
    if (p.weight.rows() != clusters || p.weight.cols() != dim || p.bias.size() != clusters)
      throw SteeringError("SteeringModel: probe output dimension must equal the cluster count");
  }
  for (int k : labels)
    if (k < 0 || k >= clusters) throw SteeringError("SteeringModel: label out of range");
}

SteeringModel cluster_diffs(const DiffSet& diffs, const ClusterOptions& options) {
  diffs.validate();
  if (diffs.deltas.empty()) throw SteeringError("cluster_diffs: empty DiffSet");
  const KMeansResult km = kmeans(diffs.flattened(), options.clusters, options.seed, options.max_iter, options.tol);
  SteeringModel m;
  m.clusters = options.clusters;
  m.num_layers = diffs.num_layers;
  m.dim = diffs.dim;
  m.site = diffs.site;
  m.reduction = diffs.reduction;
  m.alpha = options.alpha;
  m.labels = km.labels;
  for (int l = 0; l < diffs.num_layers; ++l) {
    m.centroids.push_back(km.centroids.middleCols(static_cast<Eigen::Index>(l) * diffs.dim, diffs.dim));
    m.probes.push_back(LinearProbe::zeros(m.clusters, m.dim));
  }
  return m;
}

std::vector<LinearProbe> train_probes(const DiffSet& diffs, const std::vector<int>& labels, int clusters,
                                      const ProbeTrainOptions& options) {
  if (diffs.deltas.empty()) throw SteeringError("train_probes: empty DiffSet");
  if (labels.size() != diffs.deltas.size()) throw SteeringError("train_probes: label count mismatch");
  std::vector<LinearProbe> out;
  for (int l = 0; l < diffs.num_layers; ++l) out.push_back(train_probe(diffs.layer(l), labels, clusters, options).probe);
  return out;
}

RefineResult refine(const Transformer& base, const SteeringModel& model, const std::vector<PromptPair>& pairs,
                    const RefineConfig& config) {
  model.validate();
  if (config.epochs < 0) throw SteeringError("refine: epochs must be >= 0");
  if (!(config.learning_rate > 0.0)) throw SteeringError("refine: learning rate must be positive");
  if (config.steps < 1) throw SteeringError("refine: steps must be >= 1");
  if (pairs.size() != model.labels.size()) throw SteeringError("refine: pairs do not align with model labels");
  if (model.num_layers != base.config().num_layers || model.dim != site_dim(base.config(), model.site))
    throw SteeringError("refine: steering model does not match the base model");

  // The base model is frozen and injection uses the known labels, so the
  // steered trajectories do not depend on the probes: activations are
  // collected once and every epoch is a gradient step on the same data.
  const auto L = static_cast<std::size_t>(model.num_layers);
  std::vector<std::vector<Eigen::VectorXd>> rows(L);
  std::vector<int> targets;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const int j = model.labels[i];
    std::vector<Eigen::VectorXd> step_rows(L);
    RunOptions options;
    options.all_logits = false;
    options.interceptor = [&](const TapSite& site, Activations& act) {
      if (site.kind != model.site) return;
      const auto l = static_cast<std::size_t>(site.layer);
      step_rows[l] = act.row(act.rows() - 1).transpose();
      act.rowwise() += config.alpha * model.centroids[l].row(j);
    };
    TokenSeq tokens = render_prompt_tokens(pairs[i].question);
    for (int s = 0; s < config.steps && static_cast<int>(tokens.size()) <= base.config().max_seq_len; ++s) {
      const ForwardOutput fo = base.run(tokens, options);
      for (std::size_t l = 0; l < L; ++l) rows[l].push_back(step_rows[l]);
      targets.push_back(j);
      const auto next = static_cast<Token>(
          argmax(std::span<const double>(fo.logits.data(), static_cast<std::size_t>(fo.logits.cols()))));
      if (next == tok::kEos) break;
      tokens.push_back(next);
    }
  }

  std::vector<RowMatrix<double>> x(L);
  for (std::size_t l = 0; l < L; ++l) {
    x[l].resize(static_cast<Eigen::Index>(rows[l].size()), model.dim);
    for (std::size_t r = 0; r < rows[l].size(); ++r) x[l].row(static_cast<Eigen::Index>(r)) = rows[l][r].transpose();
  }

  RefineResult result{model, {}};
  LinearProbe grad;
  for (int e = 0; e < config.epochs; ++e) {
    double total = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      LinearProbe& p = result.model.probes[l];
      total += probe_loss(p, x[l], targets, &grad);
      p.weight -= config.learning_rate * grad.weight;
      p.bias -= config.learning_rate * grad.bias;
    }
    const double mean = total / static_cast<double>(L);
    if (!std::isfinite(mean)) throw SteeringError("refine: non-finite loss at epoch " + std::to_string(e));
    result.epoch_loss.push_back(mean);
  }
  result.model.alpha = config.alpha;
  return result;
}

HookSet steer_hooks(const SteeringModel& model, const std::map<int, Eigen::VectorXd>& layer_activations,
                    const std::vector<int>& layer_subset) {
  HookSet hooks;
  for (int l : layer_subset) {
    check_layer(model, l);
    const auto it = layer_activations.find(l);
    if (it == layer_activations.end()) throw SteeringError("steer_hooks: no activation for layer " + std::to_string(l));
    if (it->second.size() != model.dim) throw SteeringError("steer_hooks: activation dimension mismatch");
    const int k = model.probes[static_cast<std::size_t>(l)].predict(it->second);
    hooks.add_vector({l, model.site}, model.alpha * model.centroids[static_cast<std::size_t>(l)].row(k).transpose());
  }
  return hooks;
}

std::vector<int> all_layers(const SteeringModel& model) {
  std::vector<int> out(static_cast<std::size_t>(model.num_layers));
  for (int l = 0; l < model.num_layers; ++l) out[static_cast<std::size_t>(l)] = l;
  return out;
}

SiteInterceptor steering_interceptor(const SteeringModel& model, const SteerOptions& options) {
  model.validate();
  std::vector<bool> active(static_cast<std::size_t>(model.num_layers), false);
  for (int l : options.layers) {
    check_layer(model, l);
    active[static_cast<std::size_t>(l)] = true;
  }
  const double alpha = options.alpha.value_or(model.alpha);
  // Shared so copies of the interceptor see one frozen selection.
  auto frozen = std::make_shared<std::vector<int>>(static_cast<std::size_t>(model.num_layers), -1);
  const bool freeze = options.selection == Selection::per_prompt;
  return [&model, active, alpha, frozen, freeze](const TapSite& site, Activations& act) {
    if (site.kind != model.site || !active[static_cast<std::size_t>(site.layer)]) return;
    const auto l = static_cast<std::size_t>(site.layer);
    int k = (*frozen)[l];
    if (k < 0) {
      k = model.probes[l].predict(act.row(act.rows() - 1).transpose());
      if (freeze) (*frozen)[l] = k;
    }
    act.rowwise() += alpha * model.centroids[l].row(k);
  };
}

TokenSeq steer_generate(const Transformer& base, const TokenSeq& prompt, const SteeringModel& model,
                        const GenerationSettings& settings, const SteerOptions& options) {
  if (model.dim != site_dim(base.config(), model.site) || model.num_layers != base.config().num_layers)
    throw SteeringError("steer_generate: steering model does not match the base model");
  RunOptions run;
  if (!options.layers.empty()) run.interceptor = steering_interceptor(model, options);
  return base.generate(prompt, settings, run);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a simple combination of the inputs.
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(master) ^ a) ^ b);
}

std::vector<SweepRow> alpha_sweep(const Transformer& base, const SteeringModel& model,
                                  const std::vector<std::string>& prompts, const std::vector<double>& alphas,
                                  const GenerationSettings& settings, int reps, const SteerOptions& options,
                                  std::string_view target, int threads) {
  if (alphas.empty()) throw SteeringError("alpha_sweep: no alpha values");
  if (reps < 1) throw SteeringError("alpha_sweep: reps must be >= 1");
  const auto label = language_from_string(target);
  if (!label) throw SteeringError("alpha_sweep: unknown target language " + std::string(target));
  std::vector<TokenSeq> encoded;
  for (const auto& p : prompts) encoded.push_back(render_prompt_tokens(p));
  const std::size_t n = prompts.size() * static_cast<std::size_t>(reps);
  std::vector<SweepRow> out;
  for (double alpha : alphas) {
    SteerOptions opt = options;
    opt.alpha = alpha;
    std::vector<char> hit(n, 0);
    detail::parallel_for(n, threads, [&](std::size_t idx) {
      const std::size_t p = idx / static_cast<std::size_t>(reps);
      const std::size_t r = idx % static_cast<std::size_t>(reps);
      GenerationSettings s = settings;
      s.seed = derive_seed(settings.seed, p, r);
      const TokenSeq gen = steer_generate(base, encoded[p], model, s, opt);
      hit[idx] = detect_language(gen) == *label;
    });
    SweepRow row{alpha, 0.0, static_cast<int>(n)};
    for (char h : hit) row.rate += h;
    row.rate = n ? row.rate / static_cast<double>(n) : 0.0;
    out.push_back(row);
  }
  return out;
}

}  // namespace steerlab
