#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steerlab/corpus.hpp"
#include "steerlab/model.hpp"
#include "steerlab/steering.hpp"

namespace steerlab {

enum class LanguageLabel { python, cpp, java, julia, unknown };
inline constexpr std::size_t kLanguageCount = 5;

std::string_view to_string(LanguageLabel label);
std::optional<LanguageLabel> language_from_string(std::string_view name);

/// First markdown fence tag decides; otherwise a fixed-priority keyword
/// table (cpp, java, julia, python); otherwise unknown.
LanguageLabel detect_language(std::string_view text);
/// Generated tokens: the first fence token decides, since a fence is one
/// token here even when the bytes after it would spoil the decoded tag.
/// Without a fence token, falls back to the text rules.
LanguageLabel detect_language(const TokenSeq& generated);

struct BenchmarkItem {
  std::string name;
  std::string prompt;
};

struct ProblemCounts {
  std::string name;
  std::array<int, kLanguageCount> counts{};  // indexed by LanguageLabel
};

struct BenchmarkReport {
  int reps = 0;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::vector<ProblemCounts> problems;

  int total() const;
  std::array<int, kLanguageCount> totals() const;
  /// Aggregate share of each label in percent.
  std::array<double, kLanguageCount> percentages() const;
  double rate(LanguageLabel label) const;
};

/// Produces one completion. Exceptions are counted as unknown.
using TextGenerator = std::function<std::string(const std::string& prompt, double temperature, std::uint64_t seed)>;

/// reps samples per item; sample r of item i uses derive_seed(seed, i, r).
BenchmarkReport run_preference_benchmark(const TextGenerator& generator, const std::vector<BenchmarkItem>& items,
                                         int reps, double temperature, std::uint64_t seed, int threads = 1);

/// Completion text (generated tokens only, EOS dropped) from the toy model.
TextGenerator model_generator(const Transformer& model, int max_new_tokens, const HookSet* hooks = nullptr);
TextGenerator steered_generator(const Transformer& model, const SteeringModel& steering, int max_new_tokens,
                                const SteerOptions& options);

void write_json(const BenchmarkReport& report, std::ostream& out);
void write_csv(const BenchmarkReport& report, std::ostream& out);

double accuracy(std::span<const int> truth, std::span<const int> predicted);
double macro_f1(std::span<const int> truth, std::span<const int> predicted, int classes);

struct LayerProbeMetrics {
  double standard_accuracy = 0.0;
  double standard_f1 = 0.0;
  double refined_accuracy = 0.0;
  double refined_f1 = 0.0;
};

struct ProbeEvalReport {
  std::vector<LayerProbeMetrics> layers;
  LayerProbeMetrics mean;
  std::vector<int> true_labels;
  std::vector<std::vector<int>> standard_predictions;  // per layer
  std::vector<std::vector<int>> refined_predictions;
};

/// Template-ensemble probe evaluation. For template pair t, the positive
/// side renders cpp[t] and the negative side python[t] from the problem
/// text; deltas are averaged over pairs. Truth is the nearest standard
/// centroid on the flattened mean delta.
ProbeEvalReport evaluate_probes(const Transformer& model, const SteeringModel& standard,
                                const SteeringModel& refined, const std::vector<PromptPair>& test_pairs,
                                const TemplateSet& templates, int threads = 1);

void write_json(const ProbeEvalReport& report, std::ostream& out);
void write_csv(const ProbeEvalReport& report, std::ostream& out);

struct TimingReport {
  std::string label;
  double mean_seconds = 0.0;
  double std_seconds = 0.0;  // sample standard deviation; 0 for one run
  int runs = 0;
  int warmup = 0;
  std::vector<double> samples;
};

/// Runs warmup + runs executions, timing the last `runs` with a monotonic clock.
TimingReport timing_bench(const std::function<void()>& task, int runs = 25, int warmup = 5,
                          std::string label = {});

void write_json(const std::vector<TimingReport>& reports, std::ostream& out);

}  // namespace steerlab
