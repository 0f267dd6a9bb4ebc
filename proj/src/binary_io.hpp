#pragma once

// Shared layout for every binary artifact: 4-byte magic, u32 version,
// u64 header length, canonical JSON header, then little-endian f32 payload.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace steerlab::detail {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  v = to_le(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, std::string_view what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("truncated " + std::string(what));
  return to_le(v);
}

inline void write_header(std::ostream& os, std::string_view magic, std::uint32_t version,
                         const nlohmann::json& header) {
  os.write(magic.data(), 4);
  write_pod<std::uint32_t>(os, version);
  const std::string text = header.dump();
  write_pod<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

struct ParsedHeader {
  std::uint32_t version = 0;
  nlohmann::json json;
};

inline ParsedHeader read_header(std::istream& is, std::string_view magic, std::uint32_t max_version) {
  char buf[4] = {};
  if (!is.read(buf, 4) || std::string_view(buf, 4) != magic) throw FormatError("bad magic");
  ParsedHeader h;
  h.version = read_pod<std::uint32_t>(is, "version");
  if (h.version == 0 || h.version > max_version)
    throw FormatError("version unsupported: " + std::to_string(h.version));
  const auto len = read_pod<std::uint64_t>(is, "header length");
  if (len > (std::uint64_t{1} << 30)) throw FormatError("header length implausible");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated header");
  try {
    h.json = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header JSON: ") + e.what());
  }
  return h;
}

inline void write_f32(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float v : values) write_pod<float>(os, v);
  }
}

inline void read_f32(std::istream& is, std::span<float> out) {
  if (!is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes())))
    throw FormatError("truncated payload");
  if constexpr (std::endian::native == std::endian::big) {
    for (float& v : out) v = to_le(v);
  }
}

/// Remaining bytes from the current position to end of stream.
inline std::uint64_t remaining_bytes(std::istream& is) {
  const auto here = is.tellg();
  is.seekg(0, std::ios::end);
  const auto end = is.tellg();
  is.seekg(here);
  return static_cast<std::uint64_t>(end - here);
}

}  // namespace steerlab::detail
