#include "steerlab/tokenizer.hpp"

#include <array>
#include <charconv>
#include <utility>

namespace steerlab {

namespace {

constexpr std::array<std::pair<std::string_view, Token>, 4> kFences{{
    {"```python", tok::kFencePython},
    {"```julia", tok::kFenceJulia},
    {"```java", tok::kFenceJava},
    {"```cpp", tok::kFenceCpp},
}};

}  // namespace

TokenSeq encode(std::string_view text) {
  TokenSeq out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    if (text[i] == '`') {
      for (const auto& [str, id] : kFences) {
        if (text.substr(i, str.size()) == str) {
          out.push_back(id);
          i += str.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) {
      out.push_back(static_cast<Token>(static_cast<unsigned char>(text[i])));
      ++i;
    }
  }
  return out;
}

std::string token_text(Token t) {
  if (t >= 0 && t < 256) return std::string(1, static_cast<char>(t));
  switch (t) {
    case tok::kFenceCpp: return "```cpp";
    case tok::kFencePython: return "```python";
    case tok::kFenceJava: return "```java";
    case tok::kFenceJulia: return "```julia";
    case tok::kBos:
    case tok::kEos: return "";
    default: return "<unk>";
  }
}

std::string decode(const TokenSeq& tokens) {
  std::string out;
  for (Token t : tokens) out += token_text(t);
  return out;
}

std::optional<Token> token_from_name(std::string_view name) {
  if (name == "cpp" || name == "c++" || name == "```cpp") return tok::kFenceCpp;
  if (name == "python" || name == "```python") return tok::kFencePython;
  if (name == "java" || name == "```java") return tok::kFenceJava;
  if (name == "julia" || name == "```julia") return tok::kFenceJulia;
  if (name == "bos") return tok::kBos;
  if (name == "eos") return tok::kEos;
  if (name.size() == 1) return static_cast<Token>(static_cast<unsigned char>(name[0]));
  Token id = 0;
  auto [ptr, ec] = std::from_chars(name.data(), name.data() + name.size(), id);
  if (ec == std::errc() && ptr == name.data() + name.size() && id >= 0) return id;
  return std::nullopt;
}

bool is_fence(Token t) { return t >= tok::kFenceCpp && t <= tok::kFenceJulia; }

}  // namespace steerlab
