#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace steerlab {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by the four
// language fences and the sequence control tokens. Ids at or above
// kMinVocab are valid but never produced by encode().
namespace tok {
inline constexpr Token kFenceCpp = 256;
inline constexpr Token kFencePython = 257;
inline constexpr Token kFenceJava = 258;
inline constexpr Token kFenceJulia = 259;
inline constexpr Token kBos = 260;
inline constexpr Token kEos = 261;
inline constexpr Token kMinVocab = 262;
}  // namespace tok

/// Encodes UTF-8 text. The fence strings "```cpp", "```python", "```java"
/// and "```julia" become single tokens; everything else is one token per byte.
TokenSeq encode(std::string_view text);

/// Inverse of encode(). BOS/EOS decode to nothing, unknown ids to "<unk>".
std::string decode(const TokenSeq& tokens);

std::string token_text(Token t);

/// Resolves a user-facing token name ("cpp", "python", "eos", a single
/// character, or a numeric id) to a token id.
std::optional<Token> token_from_name(std::string_view name);

bool is_fence(Token t);

}  // namespace steerlab
