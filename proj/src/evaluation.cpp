#include "steerlab/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <ostream>

#include <json.hpp>

#include "parallel.hpp"

namespace steerlab {

namespace {

constexpr std::array<LanguageLabel, kLanguageCount> kLabels = {LanguageLabel::python, LanguageLabel::cpp,
                                                              LanguageLabel::java, LanguageLabel::julia,
                                                              LanguageLabel::unknown};

std::size_t index_of(LanguageLabel l) { return static_cast<std::size_t>(l); }

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::optional<LanguageLabel> fence_language(std::string_view text) {
  const auto pos = text.find("```");
  if (pos == std::string_view::npos) return std::nullopt;
  std::size_t end = pos + 3;
  while (end < text.size() && (std::isalnum(static_cast<unsigned char>(text[end])) || text[end] == '+')) ++end;
  const std::string tag = lower(text.substr(pos + 3, end - pos - 3));
  if (tag == "python") return LanguageLabel::python;
  if (tag == "cpp" || tag == "c++") return LanguageLabel::cpp;
  if (tag == "java") return LanguageLabel::java;
  if (tag == "julia") return LanguageLabel::julia;
  return std::nullopt;
}

bool julia_function(std::string_view text) {
  const auto f = text.find("function ");
  return f != std::string_view::npos && text.find("end", f + 9) != std::string_view::npos;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string completion_text(const TokenSeq& generated) {
  TokenSeq body = generated;
  if (!body.empty() && body.back() == tok::kEos) body.pop_back();
  return decode(body);
}

}  // namespace

std::string_view to_string(LanguageLabel label) {
  switch (label) {
    case LanguageLabel::python: return "python";
    case LanguageLabel::cpp: return "cpp";
    case LanguageLabel::java: return "java";
    case LanguageLabel::julia: return "julia";
    case LanguageLabel::unknown: break;
  }
  return "unknown";
}

std::optional<LanguageLabel> language_from_string(std::string_view name) {
  for (LanguageLabel l : kLabels)
    if (to_string(l) == name) return l;
  if (name == "c++") return LanguageLabel::cpp;
  return std::nullopt;
}

LanguageLabel detect_language(std::string_view text) {
  if (auto l = fence_language(text)) return *l;
  if (text.find("#include") != std::string_view::npos || text.find("std::") != std::string_view::npos)
    return LanguageLabel::cpp;
  if (text.find("public static void") != std::string_view::npos ||
      text.find("System.out.") != std::string_view::npos)
    return LanguageLabel::java;
  if (julia_function(text)) return LanguageLabel::julia;
  if (text.find("def ") != std::string_view::npos || text.find("import ") != std::string_view::npos)
    return LanguageLabel::python;
  return LanguageLabel::unknown;
}

LanguageLabel detect_language(const TokenSeq& generated) {
  for (Token t : generated) {
    switch (t) {
      case tok::kFenceCpp: return LanguageLabel::cpp;
      case tok::kFencePython: return LanguageLabel::python;
      case tok::kFenceJava: return LanguageLabel::java;
      case tok::kFenceJulia: return LanguageLabel::julia;
      default: break;
    }
  }
  return detect_language(decode(generated));
}

int BenchmarkReport::total() const {
  int n = 0;
  for (int c : totals()) n += c;
  return n;
}

std::array<int, kLanguageCount> BenchmarkReport::totals() const {
  std::array<int, kLanguageCount> t{};
  for (const auto& p : problems)
    for (std::size_t i = 0; i < kLanguageCount; ++i) t[i] += p.counts[i];
  return t;
}

std::array<double, kLanguageCount> BenchmarkReport::percentages() const {
  std::array<double, kLanguageCount> pct{};
  const int n = total();
  const auto t = totals();
  if (n == 0) return pct;
  for (std::size_t i = 0; i < kLanguageCount; ++i) pct[i] = 100.0 * t[i] / n;
  return pct;
}

double BenchmarkReport::rate(LanguageLabel label) const {
  const int n = total();
  return n == 0 ? 0.0 : static_cast<double>(totals()[index_of(label)]) / n;
}

BenchmarkReport run_preference_benchmark(const TextGenerator& generator, const std::vector<BenchmarkItem>& items,
                                         int reps, double temperature, std::uint64_t seed, int threads) {
  if (reps < 1) throw std::invalid_argument("run_preference_benchmark: reps must be >= 1");
  const std::size_t per = static_cast<std::size_t>(reps);
  std::vector<LanguageLabel> labels(items.size() * per, LanguageLabel::unknown);
  detail::parallel_for(labels.size(), threads, [&](std::size_t idx) {
    const std::size_t i = idx / per;
    const std::size_t r = idx % per;
    try {
      labels[idx] = detect_language(generator(items[i].prompt, temperature, derive_seed(seed, i, r)));
    } catch (const std::exception&) {
      labels[idx] = LanguageLabel::unknown;
    }
  });
  BenchmarkReport report;
  report.reps = reps;
  report.temperature = temperature;
  report.seed = seed;
  for (std::size_t i = 0; i < items.size(); ++i) {
    ProblemCounts pc{items[i].name, {}};
    for (std::size_t r = 0; r < per; ++r) ++pc.counts[index_of(labels[i * per + r])];
    report.problems.push_back(std::move(pc));
  }
  return report;
}

TextGenerator model_generator(const Transformer& model, int max_new_tokens, const HookSet* hooks) {
  return [&model, max_new_tokens, hooks](const std::string& prompt, double temperature, std::uint64_t seed) {
    RunOptions options;
    options.hooks = hooks;
    return completion_text(model.generate(render_prompt_tokens(prompt), {temperature, max_new_tokens, seed}, options));
  };
}

TextGenerator steered_generator(const Transformer& model, const SteeringModel& steering, int max_new_tokens,
                                const SteerOptions& options) {
  return [&model, &steering, max_new_tokens, options](const std::string& prompt, double temperature,
                                                      std::uint64_t seed) {
    return completion_text(
        steer_generate(model, render_prompt_tokens(prompt), steering, {temperature, max_new_tokens, seed}, options));
  };
}

void write_json(const BenchmarkReport& report, std::ostream& out) {
  nlohmann::ordered_json j;
  j["reps"] = report.reps;
  j["temperature"] = report.temperature;
  j["seed"] = report.seed;
  auto& problems = j["problems"] = nlohmann::ordered_json::array();
  for (const auto& p : report.problems) {
    nlohmann::ordered_json counts;
    for (LanguageLabel l : kLabels) counts[std::string(to_string(l))] = p.counts[index_of(l)];
    problems.push_back({{"name", p.name}, {"counts", counts}});
  }
  const auto pct = report.percentages();
  nlohmann::ordered_json agg;
  for (LanguageLabel l : kLabels) agg[std::string(to_string(l))] = pct[index_of(l)];
  j["percentages"] = agg;
  out << j.dump(2) << '\n';
}

void write_csv(const BenchmarkReport& report, std::ostream& out) {
  out << "problem";
  for (LanguageLabel l : kLabels) out << ',' << to_string(l);
  out << '\n';
  for (const auto& p : report.problems) {
    out << '"' << p.name << '"';
    for (int c : p.counts) out << ',' << c;
    out << '\n';
  }
}

double accuracy(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (truth.empty()) throw std::invalid_argument("accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == predicted[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double macro_f1(std::span<const int> truth, std::span<const int> predicted, int classes) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("macro_f1: length mismatch");
  if (classes < 1) throw std::invalid_argument("macro_f1: classes must be >= 1");
  std::vector<long> tp(static_cast<std::size_t>(classes)), fp(tp.size()), fn(tp.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || t >= classes || p < 0 || p >= classes) throw std::invalid_argument("macro_f1: label out of range");
    if (t == p) {
      ++tp[static_cast<std::size_t>(t)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(t)];
    }
  }
  double sum = 0.0;
  for (std::size_t c = 0; c < tp.size(); ++c) {
    if (tp[c] + fp[c] == 0 || tp[c] + fn[c] == 0) continue;
    const double precision = static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c]);
    const double recall = static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fn[c]);
    if (precision + recall > 0.0) sum += 2.0 * precision * recall / (precision + recall);
  }
  return sum / classes;
}

ProbeEvalReport evaluate_probes(const Transformer& model, const SteeringModel& standard,
                                const SteeringModel& refined, const std::vector<PromptPair>& test_pairs,
                                const TemplateSet& templates, int threads) {
  if (test_pairs.empty()) throw SteeringError("evaluate_probes: empty test set");
  const std::size_t T = std::min(templates.cpp.size(), templates.python.size());
  if (T == 0) throw SteeringError("evaluate_probes: empty template set");
  standard.validate();
  refined.validate();
  if (refined.clusters != standard.clusters || refined.num_layers != standard.num_layers ||
      refined.dim != standard.dim || refined.site != standard.site)
    throw SteeringError("evaluate_probes: standard and refined models differ in shape");

  const int L = standard.num_layers;
  std::vector<RowMatrix<double>> mean_delta(test_pairs.size());
  detail::parallel_for(test_pairs.size(), threads, [&](std::size_t i) {
    const PromptPair& pair = test_pairs[i];
    RowMatrix<double> acc = RowMatrix<double>::Zero(L, standard.dim);
    for (std::size_t t = 0; t < T; ++t) {
      const std::string q_pos = render_template(templates.cpp[t], pair.problem_text()) + "\n";
      const std::string q_neg = render_template(templates.python[t], pair.problem_text()) + "\n";
      acc += extract_answer_activations(model, q_pos, pair.positive, standard.site, standard.reduction) -
             extract_answer_activations(model, q_neg, pair.negative, standard.site, standard.reduction);
    }
    mean_delta[i] = acc / static_cast<double>(T);
  });

  ProbeEvalReport report;
  const RowMatrix<double> flat_centroids = standard.flat_centroids();
  for (const auto& d : mean_delta)
    report.true_labels.push_back(
        nearest_centroid(flat_centroids, Eigen::Map<const Eigen::RowVectorXd>(d.data(), d.size())));
  for (int l = 0; l < L; ++l) {
    std::vector<int> ps, pr;
    for (const auto& d : mean_delta) {
      const Eigen::VectorXd h = d.row(l).transpose();
      ps.push_back(standard.probes[static_cast<std::size_t>(l)].predict(h));
      pr.push_back(refined.probes[static_cast<std::size_t>(l)].predict(h));
    }
    LayerProbeMetrics m;
    m.standard_accuracy = accuracy(report.true_labels, ps);
    m.standard_f1 = macro_f1(report.true_labels, ps, standard.clusters);
    m.refined_accuracy = accuracy(report.true_labels, pr);
    m.refined_f1 = macro_f1(report.true_labels, pr, standard.clusters);
    report.layers.push_back(m);
    report.standard_predictions.push_back(std::move(ps));
    report.refined_predictions.push_back(std::move(pr));
  }
  for (const auto& m : report.layers) {
    report.mean.standard_accuracy += m.standard_accuracy / L;
    report.mean.standard_f1 += m.standard_f1 / L;
    report.mean.refined_accuracy += m.refined_accuracy / L;
    report.mean.refined_f1 += m.refined_f1 / L;
  }
  return report;
}

void write_json(const ProbeEvalReport& report, std::ostream& out) {
  auto metrics = [](const LayerProbeMetrics& m) {
    return nlohmann::ordered_json{{"standard_accuracy", m.standard_accuracy},
                                  {"standard_macro_f1", m.standard_f1},
                                  {"refined_accuracy", m.refined_accuracy},
                                  {"refined_macro_f1", m.refined_f1}};
  };
  nlohmann::ordered_json j;
  j["layers"] = nlohmann::ordered_json::array();
  for (const auto& m : report.layers) j["layers"].push_back(metrics(m));
  j["mean"] = metrics(report.mean);
  j["true_labels"] = report.true_labels;
  out << j.dump(2) << '\n';
}

void write_csv(const ProbeEvalReport& report, std::ostream& out) {
  out << "layer,standard_accuracy,standard_macro_f1,refined_accuracy,refined_macro_f1\n";
  out.precision(17);
  for (std::size_t l = 0; l < report.layers.size(); ++l) {
    const auto& m = report.layers[l];
    out << l << ',' << m.standard_accuracy << ',' << m.standard_f1 << ',' << m.refined_accuracy << ','
        << m.refined_f1 << '\n';
  }
}

TimingReport timing_bench(const std::function<void()>& task, int runs, int warmup, std::string label) {
  if (runs < 1) throw std::invalid_argument("timing_bench: runs must be >= 1");
  if (warmup < 0) throw std::invalid_argument("timing_bench: warmup must be >= 0");
  TimingReport r;
  r.label = std::move(label);
  r.runs = runs;
  r.warmup = warmup;
  for (int i = 0; i < warmup; ++i) task();
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    task();
    const auto t1 = std::chrono::steady_clock::now();
    r.samples.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  r.mean_seconds = mean(r.samples);
  if (runs > 1) {
    double ss = 0.0;
    for (double s : r.samples) ss += (s - r.mean_seconds) * (s - r.mean_seconds);
    r.std_seconds = std::sqrt(ss / (runs - 1));
  }
  return r;
}

void write_json(const std::vector<TimingReport>& reports, std::ostream& out) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : reports)
    j.push_back({{"label", r.label},
                 {"mean_seconds", r.mean_seconds},
                 {"std_seconds", r.std_seconds},
                 {"runs", r.runs},
                 {"warmup", r.warmup},
                 {"samples", r.samples}});
  out << j.dump(2) << '\n';
}

}  // namespace steerlab
