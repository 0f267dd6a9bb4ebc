#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/model.hpp"
#include "steerlab/steering.hpp"

namespace steerlab {

class TraceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kTraceVersion = 1;

enum class StyleTag { positive, negative, none };
std::string_view to_string(StyleTag tag);
StyleTag style_tag_from_string(std::string_view name);

struct TraceHeader {
  std::uint32_t version = kTraceVersion;
  std::string source_model;
  int num_layers = 0;
  std::vector<SiteKind> sites;  // payload order
  std::map<SiteKind, int> dims;
  int token_count = 0;
  /// Rows before this index belong to the prompt; 0 when only answer tokens were recorded.
  int answer_start = 0;
  std::string prompt_id;
  StyleTag style = StyleTag::none;
  std::string dtype = "f32-le";

  void validate() const;
  std::uint64_t payload_bytes() const;
};

struct TraceFile {
  TraceHeader header;
  /// tensors[s][l]: token_count x dims[sites[s]].
  std::vector<std::vector<RowMatrix<float>>> tensors;

  void validate() const;
};

/// Header (u64-prefixed canonical JSON), then each site's L x tokens x dim
/// tensor. Shapes are checked before the file is opened.
void write_trace(const TraceFile& trace, const std::filesystem::path& path);
TraceFile read_trace(const std::filesystem::path& path);
/// Header only; payload size is still checked.
TraceHeader read_trace_header(const std::filesystem::path& path);

/// Records every position of BOS + question + answer from the toy model.
TraceFile record_trace(const Transformer& model, std::string_view question, std::string_view answer,
                       const std::vector<SiteKind>& sites, const std::string& prompt_id, StyleTag style,
                       const std::string& source_model = "steerlab-toy");

/// Pairs traces by prompt id (positive order kept) and reduces the answer
/// rows of `site` (the only site if unset).
DiffSet diffs_from_traces(const std::vector<TraceFile>& positive, const std::vector<TraceFile>& negative,
                          Reduction reduction, std::optional<SiteKind> site = std::nullopt);

}  // namespace steerlab
