#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "steerlab/corpus.hpp"
#include "steerlab/kmeans.hpp"
#include "steerlab/model.hpp"
#include "steerlab/probe.hpp"

namespace steerlab {

class SteeringError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Reduction { final_token, mean_answer_tokens };

std::string_view to_string(Reduction r);
Reduction reduction_from_string(std::string_view name);

/// Per-prompt, per-layer difference vectors h+ - h-.
struct DiffSet {
  SiteKind site = SiteKind::attn_output;
  Reduction reduction = Reduction::final_token;
  int num_layers = 0;
  int dim = 0;
  std::vector<std::string> ids;
  std::vector<RowMatrix<double>> deltas;  // one num_layers x dim matrix per prompt

  std::size_t size() const { return deltas.size(); }
  /// N x (num_layers * dim), layer-major concatenation.
  RowMatrix<double> flattened() const;
  /// N x dim slice for one layer.
  RowMatrix<double> layer(int l) const;
  /// Throws SteeringError on shape or finiteness violations.
  void validate() const;
};

struct PairActivations {
  RowMatrix<double> positive;  // num_layers x dim
  RowMatrix<double> negative;
};

/// Reduces answer-position rows to one vector. Rows are rounded to f32
/// first so that live extraction and recorded traces agree bit for bit.
Eigen::VectorXd reduce_rows(const RowMatrix<float>& rows, Reduction reduction);

/// Reduced per-layer activations (num_layers x dim) of one question/answer.
RowMatrix<double> extract_answer_activations(const Transformer& model, std::string_view question,
                                             std::string_view answer, SiteKind site, Reduction reduction);

PairActivations extract_pair_activations(const Transformer& model, const PromptPair& pair, SiteKind site,
                                         Reduction reduction);
/// Same, for explicit question/answer texts.
PairActivations extract_pair_activations(const Transformer& model, std::string_view question,
                                         std::string_view positive, std::string_view negative, SiteKind site,
                                         Reduction reduction);

/// Pairs are independent; up to `threads` workers (0 = hardware concurrency).
DiffSet diff_vectors(const Transformer& model, const std::vector<PromptPair>& pairs, SiteKind site,
                     Reduction reduction, int threads = 1);

std::vector<double> layer_norm_profile(const DiffSet& diffs);

struct SteeringModel {
  int clusters = 0;
  int num_layers = 0;
  int dim = 0;
  SiteKind site = SiteKind::attn_output;
  Reduction reduction = Reduction::final_token;
  double alpha = 1.0;
  std::vector<RowMatrix<double>> centroids;  // per layer, clusters x dim
  std::vector<LinearProbe> probes;           // per layer
  std::vector<int> labels;                   // training cluster of each prompt

  /// Flattened centroids, clusters x (num_layers * dim).
  RowMatrix<double> flat_centroids() const;
  void validate() const;
};

struct ClusterOptions {
  int clusters = 4;
  std::uint64_t seed = 0;
  int max_iter = 300;
  double tol = 0.0;
  double alpha = 1.0;
};

/// K-means on flattened deltas; probes start at zero.
SteeringModel cluster_diffs(const DiffSet& diffs, const ClusterOptions& options);

/// One probe per layer on that layer's deltas against the shared labels.
std::vector<LinearProbe> train_probes(const DiffSet& diffs, const std::vector<int>& labels, int clusters,
                                      const ProbeTrainOptions& options = {});

struct RefineConfig {
  int epochs = 50;
  double learning_rate = 1e-2;
  double alpha = 1.0;
  /// Greedy answer tokens generated per prompt under injection.
  int steps = 8;
};

struct RefineResult {
  SteeringModel model;
  std::vector<double> epoch_loss;  // mean CE per epoch, before that epoch's update
};

/// Gradient refinement of the probes during steered generation with the
/// known label of each prompt. `pairs` align with model.labels.
RefineResult refine(const Transformer& base, const SteeringModel& model, const std::vector<PromptPair>& pairs,
                    const RefineConfig& config);

/// Hooks adding alpha * c_{k*,l} where k* = argmax pi_l(h_l).
HookSet steer_hooks(const SteeringModel& model, const std::map<int, Eigen::VectorXd>& layer_activations,
                    const std::vector<int>& layer_subset);

enum class Selection { per_token, per_prompt };

struct SteerOptions {
  std::vector<int> layers;  // empty: no steering
  Selection selection = Selection::per_token;
  /// Overrides model.alpha when set.
  std::optional<double> alpha;
};

/// All layers of the model.
std::vector<int> all_layers(const SteeringModel& model);

/// Interceptor performing probe selection and injection inside each forward.
SiteInterceptor steering_interceptor(const SteeringModel& model, const SteerOptions& options);

TokenSeq steer_generate(const Transformer& base, const TokenSeq& prompt, const SteeringModel& model,
                        const GenerationSettings& settings, const SteerOptions& options);

struct SweepRow {
  double alpha = 0.0;
  double rate = 0.0;
  int samples = 0;
};

/// Fraction of samples detected as `target` per alpha. Sample seeds depend
/// only on (settings.seed, prompt, rep), never on alpha.
std::vector<SweepRow> alpha_sweep(const Transformer& base, const SteeringModel& model,
                                  const std::vector<std::string>& prompts, const std::vector<double>& alphas,
                                  const GenerationSettings& settings, int reps, const SteerOptions& options,
                                  std::string_view target = "cpp", int threads = 1);

/// Deterministic per-sample seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0);

}  // namespace steerlab
