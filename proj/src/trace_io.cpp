#include "steerlab/trace_io.hpp"

#include <fstream>
#include <set>

#include "binary_io.hpp"

namespace steerlab {

namespace {

nlohmann::json header_json(const TraceHeader& h) {
  nlohmann::json dims = nlohmann::json::object();
  for (const auto& [k, d] : h.dims) dims[std::string(to_string(k))] = d;
  nlohmann::json sites = nlohmann::json::array();
  for (SiteKind s : h.sites) sites.push_back(std::string(to_string(s)));
  return {{"source_model", h.source_model}, {"num_layers", h.num_layers}, {"dims", dims},
          {"sites", sites},                 {"token_count", h.token_count}, {"answer_start", h.answer_start},
          {"prompt_id", h.prompt_id},       {"style", std::string(to_string(h.style))}, {"dtype", h.dtype}};
}

TraceHeader parse_header(const detail::ParsedHeader& ph) {
  try {
    const auto& j = ph.json;
    TraceHeader h;
    h.version = ph.version;
    h.source_model = j.at("source_model").get<std::string>();
    h.num_layers = j.at("num_layers").get<int>();
    for (const auto& s : j.at("sites")) h.sites.push_back(site_kind_from_string(s.get<std::string>()));
    for (const auto& [k, v] : j.at("dims").items()) h.dims[site_kind_from_string(k)] = v.get<int>();
    h.token_count = j.at("token_count").get<int>();
    h.answer_start = j.value("answer_start", 0);
    h.prompt_id = j.at("prompt_id").get<std::string>();
    h.style = style_tag_from_string(j.at("style").get<std::string>());
    h.dtype = j.at("dtype").get<std::string>();
    h.validate();
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw TraceError(std::string("trace header: ") + e.what());
  } catch (const ModelError& e) {
    throw TraceError(std::string("trace header: ") + e.what());
  }
}

}  // namespace

std::string_view to_string(StyleTag tag) {
  switch (tag) {
    case StyleTag::positive: return "positive";
    case StyleTag::negative: return "negative";
    case StyleTag::none: break;
  }
  return "none";
}

StyleTag style_tag_from_string(std::string_view name) {
  if (name == "positive") return StyleTag::positive;
  if (name == "negative") return StyleTag::negative;
  if (name == "none") return StyleTag::none;
  throw TraceError("unknown style tag: " + std::string(name));
}

void TraceHeader::validate() const {
  if (dtype != "f32-le") throw TraceError("unsupported dtype: " + dtype);
  if (num_layers < 1) throw TraceError("trace header: num_layers must be positive");
  if (token_count < 0) throw TraceError("trace header: negative token count");
  if (answer_start < 0 || answer_start > token_count) throw TraceError("trace header: answer_start out of range");
  std::set<SiteKind> seen;
  for (SiteKind s : sites) {
    if (!seen.insert(s).second) throw TraceError("trace header: duplicate site " + std::string(to_string(s)));
    const auto it = dims.find(s);
    if (it == dims.end() || it->second < 1)
      throw TraceError("trace header: missing or non-positive dim for " + std::string(to_string(s)));
  }
}

std::uint64_t TraceHeader::payload_bytes() const {
  std::uint64_t n = 0;
  for (SiteKind s : sites)
    n += static_cast<std::uint64_t>(num_layers) * static_cast<std::uint64_t>(token_count) *
         static_cast<std::uint64_t>(dims.at(s)) * 4;
  return n;
}

void TraceFile::validate() const {
  header.validate();
  if (tensors.size() != header.sites.size()) throw TraceError("trace: tensor count does not match site list");
  for (std::size_t s = 0; s < tensors.size(); ++s) {
    const int dim = header.dims.at(header.sites[s]);
    if (tensors[s].size() != static_cast<std::size_t>(header.num_layers))
      throw TraceError("trace: site " + std::string(to_string(header.sites[s])) + " has wrong layer count");
    for (const auto& t : tensors[s])
      if (t.rows() != header.token_count || t.cols() != dim)
        throw TraceError("trace: tensor shape mismatch at site " + std::string(to_string(header.sites[s])));
  }
}

void write_trace(const TraceFile& trace, const std::filesystem::path& path) {
  trace.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw TraceError("cannot open for writing: " + path.string());
  detail::write_header(os, "ATRC", kTraceVersion, header_json(trace.header));
  for (const auto& site : trace.tensors)
    for (const auto& t : site) detail::write_f32(os, std::span<const float>(t.data(), static_cast<std::size_t>(t.size())));
  if (!os.flush()) throw TraceError("trace write failed: " + path.string());
}

namespace {

TraceFile read_impl(const std::filesystem::path& path, bool payload) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TraceError("cannot open trace: " + path.string());
  try {
    TraceFile tf;
    tf.header = parse_header(detail::read_header(is, "ATRC", kTraceVersion));
    const std::uint64_t expected = tf.header.payload_bytes();
    const std::uint64_t actual = detail::remaining_bytes(is);
    if (actual != expected)
      throw TraceError("trace payload size mismatch: expected " + std::to_string(expected) + " bytes, got " +
                       std::to_string(actual));
    if (!payload) return tf;
    for (SiteKind s : tf.header.sites) {
      std::vector<RowMatrix<float>> layers;
      for (int l = 0; l < tf.header.num_layers; ++l) {
        RowMatrix<float> t(tf.header.token_count, tf.header.dims.at(s));
        detail::read_f32(is, std::span<float>(t.data(), static_cast<std::size_t>(t.size())));
        layers.push_back(std::move(t));
      }
      tf.tensors.push_back(std::move(layers));
    }
    return tf;
  } catch (const detail::FormatError& e) {
    throw TraceError(std::string(e.what()) + ": " + path.string());
  }
}

}  // namespace

TraceFile read_trace(const std::filesystem::path& path) { return read_impl(path, true); }

TraceHeader read_trace_header(const std::filesystem::path& path) { return read_impl(path, false).header; }

TraceFile record_trace(const Transformer& model, std::string_view question, std::string_view answer,
                       const std::vector<SiteKind>& sites, const std::string& prompt_id, StyleTag style,
                       const std::string& source_model) {
  const ModelConfig& cfg = model.config();
  const TokenSeq tokens = render_pair_tokens(question, answer);
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw ModelError("context overflow: " + std::to_string(tokens.size()) + " tokens exceed max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  RunOptions options;
  options.all_logits = false;
  for (SiteKind s : sites)
    for (int l = 0; l < cfg.num_layers; ++l) options.taps.push_back({l, s});
  const ForwardOutput fo = model.run(tokens, options);

  TraceFile tf;
  tf.header.source_model = source_model;
  tf.header.num_layers = cfg.num_layers;
  tf.header.sites = sites;
  for (SiteKind s : sites) tf.header.dims[s] = site_dim(cfg, s);
  tf.header.token_count = static_cast<int>(tokens.size());
  tf.header.answer_start = static_cast<int>(render_prompt_tokens(question).size());
  tf.header.prompt_id = prompt_id;
  tf.header.style = style;
  for (SiteKind s : sites) {
    std::vector<RowMatrix<float>> layers;
    for (int l = 0; l < cfg.num_layers; ++l) layers.push_back(fo.trace.at({l, s}).cast<float>());
    tf.tensors.push_back(std::move(layers));
  }
  tf.validate();
  return tf;
}

DiffSet diffs_from_traces(const std::vector<TraceFile>& positive, const std::vector<TraceFile>& negative,
                          Reduction reduction, std::optional<SiteKind> site) {
  if (positive.empty()) throw TraceError("diffs_from_traces: no traces");
  if (positive.size() != negative.size())
    throw TraceError("diffs_from_traces: " + std::to_string(positive.size()) + " positive vs " +
                     std::to_string(negative.size()) + " negative traces");
  const TraceHeader& first = positive.front().header;
  if (!site) {
    if (first.sites.size() != 1) throw TraceError("diffs_from_traces: traces hold several sites; choose one");
    site = first.sites.front();
  }
  std::map<std::string, const TraceFile*> neg_by_id;
  for (const auto& t : negative)
    if (!neg_by_id.emplace(t.header.prompt_id, &t).second)
      throw TraceError("diffs_from_traces: duplicate negative trace " + t.header.prompt_id);

  auto site_rows = [&](const TraceFile& t, int layer) -> RowMatrix<float> {
    const auto& h = t.header;
    std::size_t s = 0;
    while (s < h.sites.size() && h.sites[s] != *site) ++s;
    if (s == h.sites.size())
      throw TraceError("trace " + h.prompt_id + " lacks site " + std::string(to_string(*site)));
    const auto& m = t.tensors[s][static_cast<std::size_t>(layer)];
    return m.bottomRows(m.rows() - h.answer_start);
  };

  DiffSet d;
  d.site = *site;
  d.reduction = reduction;
  d.num_layers = first.num_layers;
  if (!first.dims.contains(*site)) throw TraceError("diffs_from_traces: site missing from traces");
  d.dim = first.dims.at(*site);
  std::set<std::string> used;
  for (const auto& pos : positive) {
    const std::string& id = pos.header.prompt_id;
    const auto it = neg_by_id.find(id);
    if (it == neg_by_id.end()) throw TraceError("diffs_from_traces: unpaired prompt " + id);
    if (!used.insert(id).second) throw TraceError("diffs_from_traces: duplicate positive trace " + id);
    const TraceFile& neg = *it->second;
    for (const TraceFile* t : {&pos, &neg})
      if (t->header.num_layers != d.num_layers || !t->header.dims.contains(*site) ||
          t->header.dims.at(*site) != d.dim)
        throw TraceError("diffs_from_traces: shape mismatch for prompt " + id);
    RowMatrix<double> delta(d.num_layers, d.dim);
    for (int l = 0; l < d.num_layers; ++l)
      delta.row(l) =
          (reduce_rows(site_rows(pos, l), reduction) - reduce_rows(site_rows(neg, l), reduction)).transpose();
    d.ids.push_back(id);
    d.deltas.push_back(std::move(delta));
  }
  d.validate();
  return d;
}

}  // namespace steerlab
