#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "steerlab/tokenizer.hpp"

namespace steerlab {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ProblemRecord {
  std::string name;
  std::string description;
  std::vector<std::string> tags;
  bool operator==(const ProblemRecord&) const = default;
};

/// A question with a target-style (C++) and a baseline-style (Python) answer.
struct PromptPair {
  std::string id;
  std::string question;
  std::string positive;
  std::string negative;
  /// Problem text that templates are rendered from; falls back to `question`.
  std::string description;

  const std::string& problem_text() const { return description.empty() ? question : description; }
};

/// JSONL: one {"name", "description", optional "tags"} object per line.
/// Blank lines are skipped; errors name the 1-based line number.
std::vector<ProblemRecord> parse_problems(std::istream& in);
std::vector<ProblemRecord> load_problems(const std::filesystem::path& path);
void save_problems(const std::vector<ProblemRecord>& problems, std::ostream& out);
void save_problems(const std::vector<ProblemRecord>& problems, const std::filesystem::path& path);

/// JSONL: one {"id", "question", "positive", "negative", "description"} object per line.
std::vector<PromptPair> load_pairs(const std::filesystem::path& path);
void save_pairs(const std::vector<PromptPair>& pairs, const std::filesystem::path& path);

/// JSONL token sequences: one JSON integer array per line.
std::vector<TokenSeq> load_sequences(const std::filesystem::path& path);
void save_sequences(const std::vector<TokenSeq>& seqs, const std::filesystem::path& path);

/// Directory holding the bundled assets (problems.jsonl, templates/).
std::filesystem::path bundled_data_dir();

/// Seeded permutation; the first floor(ratio * n) indices form the train split.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double ratio,
                                                                            std::uint64_t seed);

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split(const std::vector<T>& items, double ratio, std::uint64_t seed) {
  auto [train_idx, test_idx] = split_indices(items.size(), ratio, seed);
  std::pair<std::vector<T>, std::vector<T>> out;
  for (auto i : train_idx) out.first.push_back(items[i]);
  for (auto i : test_idx) out.second.push_back(items[i]);
  return out;
}

struct TemplateSet {
  std::vector<std::string> cpp;
  std::vector<std::string> python;
};

/// Ten C++ and ten Python phrasings. Substitutes written for this project;
/// only "Problem: ..." and "Implement the following in CPP: ..." are known
/// wordings from the original study.
TemplateSet bundled_templates();
/// Reads cpp.txt and python.txt (one template per line) from `dir`.
TemplateSet load_templates(const std::filesystem::path& dir);

/// Substitutes the single "{description}" (or "{desc}") placeholder.
std::string render_template(std::string_view tmpl, std::string_view description);
std::string render_prompt(const ProblemRecord& problem, std::string_view tmpl);

enum class BuiltinPrompt { language_preference, activation_preference, code_generation };
std::optional<BuiltinPrompt> builtin_prompt_from_name(std::string_view name);
std::string_view builtin_prompt_text(BuiltinPrompt which);
/// Fills the problem name and main description into a built-in prompt.
std::string render_prompt(const ProblemRecord& problem, BuiltinPrompt which);

/// Desk-scale bilingual corpus for the toy model.
struct SynthCorpus {
  std::vector<ProblemRecord> problems;
  std::vector<PromptPair> pairs;  // untagged question, C++ answer, Python answer
  std::vector<TokenSeq> sequences;  // training sequences, BOS ... EOS
  std::vector<std::vector<std::size_t>> sequence_problems;  // problems appearing in each sequence
};

/// Sequences whose problems all belong to `problem_ids`.
std::vector<TokenSeq> select_sequences(const SynthCorpus& corpus, const std::vector<std::size_t>& problem_ids);

SynthCorpus synth_corpus(int n, std::uint64_t seed);

/// Untagged question text for a problem as used by the synthetic corpus.
std::string synth_question(const ProblemRecord& problem);
/// Question carrying an explicit language tag ("cpp" or "python").
std::string synth_tagged_question(const ProblemRecord& problem, std::string_view language);

/// BOS + encode(question) + encode(answer).
TokenSeq render_pair_tokens(std::string_view question, std::string_view answer);
/// BOS + encode(question): the prompt that precedes generation.
TokenSeq render_prompt_tokens(std::string_view question);

}  // namespace steerlab
