#include "steerlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace steerlab {

namespace {

using nlohmann::json;

constexpr std::string_view kPlaceholders[] = {"{description}", "{desc}"};

// Prompt wordings used for the language-preference study, reproduced as
// published. Placeholders: {problem name}, {problem description main}.
constexpr std::string_view kLanguagePreferencePrompt =
    R"(You are given a coding problem consisting of a problem name and a main description.
Your task is to select one programming language from the following list that you think is best suited to solve the problem:
['python', 'cpp', 'julia', 'java']
Understand the scale of the problem and the need, the problem could be scientific or general. You will be provided with the problem description.

Important:
- Your response should consist of only the name of the chosen language.
- Do not include any additional text or explanation.

Example:
"problem name": "Reverse a string",
"problem description main": "Write a program to reverse a given string (e.g., 'hello' becomes 'olleh')."
Expected Answer (for example):
one programming language

Given Problem:
"problem name": "{problem name}",
"problem description main": "{problem description main}"

Expected one word Answer: )";

constexpr std::string_view kActivationPreferencePrompt =
    R"(You are given a coding problem consisting of a problem name and a main description.
Your task is to select one programming language from the following list and provide the code for the problem:
['python', 'cpp', 'julia', 'java']
Understand the scale of the problem and the need, the problem could be scientific or general. You will be provided with the problem description.

Important:
- Your response should consist of the code only.
- Do not include any additional text or explanation.

Given Problem:
"problem name": "{problem name}",
"problem description main": "{problem description main}"
Expected Answer: )";

constexpr std::string_view kCodeGenerationPrompt =
    R"(You are given a coding problem consisting of a problem name and a main description.
Your task is to select one programming language from the following list and provide the code for the problem:
['python', 'cpp']
Understand the scale of the problem and the need, the problem could be scientific or general. You will be provided with the problem description.
Important:
- Your response should consist of the code only.
- Do not include any additional text or explanation.

Given Problem:
"problem name": "{problem name}",
"problem description main": "{problem description main}"
Expected Answer: )";

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t count = 0;
  for (std::size_t pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + 1))
    ++count;
  return count;
}

std::string replace_all(std::string text, std::string_view needle, std::string_view value) {
  for (std::size_t pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + value.size()))
    text.replace(pos, needle.size(), value);
  return text;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace

std::vector<ProblemRecord> parse_problems(std::istream& in) {
  std::vector<ProblemRecord> out;
  std::set<std::string> names;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw CorpusError("malformed JSON at " + where);
    }
    if (!j.is_object()) throw CorpusError("expected a JSON object at " + where);
    if (!j.contains("name") || !j["name"].is_string()) throw CorpusError("missing \"name\" at " + where);
    if (!j.contains("description") || !j["description"].is_string())
      throw CorpusError("missing \"description\" at " + where);
    ProblemRecord r;
    r.name = j["name"].get<std::string>();
    r.description = j["description"].get<std::string>();
    if (r.description.empty()) throw CorpusError("empty description at " + where);
    if (j.contains("tags")) {
      if (!j["tags"].is_array()) throw CorpusError("\"tags\" must be an array at " + where);
      for (const auto& t : j["tags"]) {
        if (!t.is_string()) throw CorpusError("non-string tag at " + where);
        r.tags.push_back(t.get<std::string>());
      }
    }
    if (!names.insert(r.name).second) throw CorpusError("duplicate problem name \"" + r.name + "\" at " + where);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ProblemRecord> load_problems(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open " + path.string());
  return parse_problems(in);
}

void save_problems(const std::vector<ProblemRecord>& problems, std::ostream& out) {
  for (const auto& p : problems) {
    json j = {{"name", p.name}, {"description", p.description}};
    if (!p.tags.empty()) j["tags"] = p.tags;
    out << j.dump() << '\n';
  }
}

void save_problems(const std::vector<ProblemRecord>& problems, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot open for writing: " + path.string());
  save_problems(problems, out);
}

std::filesystem::path bundled_data_dir() {
#ifdef STEERLAB_DATA_DIR
  return STEERLAB_DATA_DIR;
#else
  return "data";
#endif
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double ratio,
                                                                            std::uint64_t seed) {
  if (n == 0) throw CorpusError("split: empty input");
  if (!(ratio > 0.0 && ratio < 1.0)) throw CorpusError("split: ratio must be in (0, 1)");
  const auto train_n = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
  if (train_n == 0) throw CorpusError("split: ratio leaves an empty training set");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return {std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(train_n)),
          std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(train_n), idx.end())};
}

TemplateSet bundled_templates() {
  TemplateSet t;
  t.cpp = {
      "Problem: {description}",
      "Implement the following in CPP: {description}",
      "Write C++ code for this task: {description}",
      "Using C++, solve: {description}",
      "C++ implementation requested. {description}",
      "Provide a CPP solution. {description}",
      "Task for a C++ developer: {description}",
      "In modern C++, {description}",
      "Solve with C++17: {description}",
      "Give a C++ function for: {description}",
  };
  t.python = {
      "Python problem: {description}",
      "Implement the following in Python: {description}",
      "Write Python code for this task: {description}",
      "Using Python, solve: {description}",
      "Python implementation requested. {description}",
      "Provide a Python solution. {description}",
      "Task for a Python developer: {description}",
      "In modern Python, {description}",
      "Solve with Python 3: {description}",
      "Give a Python function for: {description}",
  };
  return t;
}

TemplateSet load_templates(const std::filesystem::path& dir) {
  TemplateSet t;
  t.cpp = read_lines(dir / "cpp.txt");
  t.python = read_lines(dir / "python.txt");
  for (const auto* set : {&t.cpp, &t.python}) {
    for (const auto& s : *set) render_template(s, "");  // validates placeholder count
  }
  return t;
}

std::string render_template(std::string_view tmpl, std::string_view description) {
  std::size_t total = 0;
  std::string_view which;
  for (auto ph : kPlaceholders) {
    const std::size_t c = count_occurrences(tmpl, ph);
    if (c > 0) which = ph;
    total += c;
  }
  if (total != 1)
    throw CorpusError("template must contain exactly one {description} placeholder: \"" + std::string(tmpl) + "\"");
  std::string out(tmpl);
  out.replace(out.find(which), which.size(), description);
  return out;
}

std::string render_prompt(const ProblemRecord& problem, std::string_view tmpl) {
  return render_template(tmpl, problem.description);
}

std::optional<BuiltinPrompt> builtin_prompt_from_name(std::string_view name) {
  if (name == "language-preference") return BuiltinPrompt::language_preference;
  if (name == "activation-preference") return BuiltinPrompt::activation_preference;
  if (name == "code-generation") return BuiltinPrompt::code_generation;
  return std::nullopt;
}

std::string_view builtin_prompt_text(BuiltinPrompt which) {
  switch (which) {
    case BuiltinPrompt::language_preference: return kLanguagePreferencePrompt;
    case BuiltinPrompt::activation_preference: return kActivationPreferencePrompt;
    case BuiltinPrompt::code_generation: return kCodeGenerationPrompt;
  }
  return {};
}

std::string render_prompt(const ProblemRecord& problem, BuiltinPrompt which) {
  std::string text(builtin_prompt_text(which));
  text = replace_all(std::move(text), "{problem name}", problem.name);
  return replace_all(std::move(text), "{problem description main}", problem.description);
}

TokenSeq render_pair_tokens(std::string_view question, std::string_view answer) {
  TokenSeq t{tok::kBos};
  const TokenSeq q = encode(question);
  const TokenSeq a = encode(answer);
  t.insert(t.end(), q.begin(), q.end());
  t.insert(t.end(), a.begin(), a.end());
  return t;
}

TokenSeq render_prompt_tokens(std::string_view question) {
  TokenSeq t{tok::kBos};
  const TokenSeq q = encode(question);
  t.insert(t.end(), q.begin(), q.end());
  return t;
}

}  // namespace steerlab

namespace steerlab {

std::vector<PromptPair> load_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open " + path.string());
  std::vector<PromptPair> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PromptPair p;
      p.id = j.at("id").get<std::string>();
      p.question = j.at("question").get<std::string>();
      p.positive = j.at("positive").get<std::string>();
      p.negative = j.at("negative").get<std::string>();
      p.description = j.value("description", std::string());
      if (p.question.empty() || p.positive.empty() || p.negative.empty())
        throw CorpusError("empty field in prompt pair at line " + std::to_string(line_no));
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw CorpusError("malformed prompt pair at line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_pairs(const std::vector<PromptPair>& pairs, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot open for writing: " + path.string());
  for (const auto& p : pairs) {
    nlohmann::json j = {{"id", p.id}, {"question", p.question}, {"positive", p.positive}, {"negative", p.negative}};
    if (!p.description.empty()) j["description"] = p.description;
    out << j.dump() << '\n';
  }
}

std::vector<TokenSeq> load_sequences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open " + path.string());
  std::vector<TokenSeq> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<TokenSeq>());
    } catch (const nlohmann::json::exception&) {
      throw CorpusError("malformed token sequence at line " + std::to_string(line_no));
    }
  }
  return out;
}

void save_sequences(const std::vector<TokenSeq>& seqs, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot open for writing: " + path.string());
  for (const auto& s : seqs) out << nlohmann::json(s).dump() << '\n';
}

}  // namespace steerlab
