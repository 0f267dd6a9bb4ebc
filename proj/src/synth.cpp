#include <algorithm>
#include <array>
#include <random>
#include <set>

#include "steerlab/corpus.hpp"

namespace steerlab {

namespace {

struct Category {
  std::string_view tag;
  std::array<std::string_view, 10> verbs;
  std::array<std::string_view, 10> objects;
  std::string_view cpp_header;
  std::string_view python_header;
};

constexpr std::array<Category, 2> kCategories{{
    {"general",
     {"sort", "reverse", "search", "count", "merge", "rotate", "filter", "shuffle", "split", "scan"},
     {"list", "array", "string", "queue", "stack", "graph", "tree", "heap", "table", "deque"},
     "#include <algorithm>",
     "import itertools"},
    {"scientific",
     {"integrate", "solve", "simulate", "interpolate", "smooth", "fit", "mesh", "advect", "diffuse", "relax"},
     {"ode", "grid", "signal", "matrix", "spectrum", "field", "flux", "lattice", "plasma", "wave"},
     "#include <cmath>",
     "import numpy as np"},
}};

constexpr std::array<std::string_view, 8> kQualifiers{
    "in place", "quickly", "with a tolerance", "over n steps", "for large inputs", "in parallel", "with caching",
    "in one pass"};

struct SynthProblem {
  std::size_t category;
  std::string_view verb;
  std::string_view object;
  std::size_t qualifier;
};

std::string cpp_answer(const SynthProblem& p) {
  return "```cpp\n" + std::string(kCategories[p.category].cpp_header) + "\nvoid " + std::string(p.verb) + "_" +
         std::string(p.object) + "(auto& x) {}\n```";
}

std::string python_answer(const SynthProblem& p) {
  return "```python\n" + std::string(kCategories[p.category].python_header) + "\ndef " + std::string(p.verb) + "_" +
         std::string(p.object) + "(x): pass\n```";
}

void append(TokenSeq& seq, std::string_view text) {
  const TokenSeq t = encode(text);
  seq.insert(seq.end(), t.begin(), t.end());
}

}  // namespace

std::string synth_question(const ProblemRecord& problem) { return "Task: " + problem.description + "\n"; }

std::string synth_tagged_question(const ProblemRecord& problem, std::string_view language) {
  const std::string_view label = language == "cpp" ? "C++" : "Python";
  return "Task in " + std::string(label) + ": " + problem.description + "\n";
}

SynthCorpus synth_corpus(int n, std::uint64_t seed) {
  if (n < 1) throw CorpusError("synth_corpus: n must be >= 1");
  const std::size_t per_category = 10 * 10 * kQualifiers.size();
  if (static_cast<std::size_t>(n) > per_category * kCategories.size())
    throw CorpusError("synth_corpus: n exceeds the number of distinct synthetic problems");

  std::mt19937_64 rng(seed);
  // Draw distinct (category, verb, object, qualifier) combinations.
  std::vector<std::size_t> codes(per_category * kCategories.size());
  for (std::size_t i = 0; i < codes.size(); ++i) codes[i] = i;
  std::shuffle(codes.begin(), codes.end(), rng);
  codes.resize(static_cast<std::size_t>(n));

  SynthCorpus out;
  std::vector<SynthProblem> meta;
  for (std::size_t code : codes) {
    SynthProblem p{};
    p.category = code / per_category;
    std::size_t rest = code % per_category;
    p.qualifier = rest % kQualifiers.size();
    rest /= kQualifiers.size();
    p.object = kCategories[p.category].objects[rest % 10];
    p.verb = kCategories[p.category].verbs[rest / 10];
    meta.push_back(p);

    ProblemRecord r;
    r.name = std::string(p.verb) + "_" + std::string(p.object) + "_" + std::to_string(p.qualifier);
    r.description = std::string(p.verb) + " the " + std::string(p.object) + " " + std::string(kQualifiers[p.qualifier]) + ".";
    r.tags = {"synthetic", std::string(kCategories[p.category].tag)};
    out.problems.push_back(r);

    PromptPair pair;
    pair.id = r.name;
    pair.question = synth_question(r);
    pair.positive = cpp_answer(p);
    pair.negative = python_answer(p);
    pair.description = r.description;
    out.pairs.push_back(std::move(pair));
  }

  // Per problem: the untagged question with each answer (so an untagged
  // prompt is a coin flip between fences), the tagged questions with their
  // matching answers, and two-block sequences where the second block keeps
  // the language of the first.
  std::uniform_int_distribution<std::size_t> partner(0, out.problems.size() - 1);
  for (std::size_t i = 0; i < out.problems.size(); ++i) {
    const auto& r = out.problems[i];
    const auto& pair = out.pairs[i];
    for (bool cpp : {true, false}) {
      const std::string& answer = cpp ? pair.positive : pair.negative;
      TokenSeq untagged = render_pair_tokens(pair.question, answer);
      untagged.push_back(tok::kEos);
      out.sequences.push_back(std::move(untagged));
      out.sequence_problems.push_back({i});

      TokenSeq tagged = render_pair_tokens(synth_tagged_question(r, cpp ? "cpp" : "python"), answer);
      tagged.push_back(tok::kEos);
      out.sequences.push_back(std::move(tagged));
      out.sequence_problems.push_back({i});

      std::size_t j = partner(rng);
      if (out.problems.size() > 1) {
        while (j == i) j = partner(rng);
      }
      const auto& first = out.pairs[j];
      TokenSeq chained = render_pair_tokens(first.question, cpp ? first.positive : first.negative);
      append(chained, "\n");
      append(chained, pair.question);
      append(chained, answer);
      chained.push_back(tok::kEos);
      out.sequences.push_back(std::move(chained));
      out.sequence_problems.push_back({j, i});
    }
  }
  return out;
}

std::vector<TokenSeq> select_sequences(const SynthCorpus& corpus, const std::vector<std::size_t>& problem_ids) {
  const std::set<std::size_t> allowed(problem_ids.begin(), problem_ids.end());
  std::vector<TokenSeq> out;
  for (std::size_t s = 0; s < corpus.sequences.size(); ++s) {
    const auto& used = corpus.sequence_problems[s];
    if (std::all_of(used.begin(), used.end(), [&](std::size_t p) { return allowed.count(p) > 0; }))
      out.push_back(corpus.sequences[s]);
  }
  return out;
}

}  // namespace steerlab
