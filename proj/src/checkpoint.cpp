#include "steerlab/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "steerlab/hashing.hpp"

namespace steerlab {

namespace {

nlohmann::json config_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim}, {"num_heads", c.num_heads},
          {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"seed", c.seed}};
}

ModelConfig config_from(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("invalid model config: ") + e.what());
  }
}

// Shapes a fresh, zero-filled parameter set from a config.
ModelParams shaped(const ModelConfig& c) {
  ModelParams p;
  p.config = c;
  const int d = c.hidden_dim;
  p.token_embedding = RowMatrix<float>::Zero(c.vocab_size, d);
  p.position_embedding = RowMatrix<float>::Zero(c.max_seq_len, d);
  p.layers.resize(static_cast<std::size_t>(c.num_layers));
  for (auto& l : p.layers) {
    l.attn_norm = Vector<float>::Zero(d);
    l.wq = l.wk = l.wv = l.wo = RowMatrix<float>::Zero(d, d);
    l.mlp_norm = Vector<float>::Zero(d);
    l.w_gate = l.w_up = RowMatrix<float>::Zero(c.ffn_dim, d);
    l.w_down = RowMatrix<float>::Zero(d, c.ffn_dim);
  }
  p.lm_head = RowMatrix<float>::Zero(c.vocab_size, d);
  p.lm_bias = Vector<float>::Zero(c.vocab_size);
  return p;
}

}  // namespace

std::string config_to_json(const ModelConfig& config) { return config_json(config).dump(); }

ModelConfig config_from_json(const std::string& text) {
  try {
    return config_from(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ModelError(std::string("invalid model config JSON: ") + e.what());
  }
}

void save_params(const ModelParams& params, std::ostream& os) {
  detail::write_header(os, "STLB", kCheckpointVersion, config_json(params.config));
  for_each_tensor(params, [&](std::string_view, const auto& t) {
    detail::write_f32(os, std::span<const float>(t.data(), static_cast<std::size_t>(t.size())));
  });
  if (!os) throw ModelError("checkpoint write failed");
}

void save_params(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ModelError("cannot open for writing: " + path.string());
  save_params(params, os);
}

ModelParams load_params(std::istream& is) {
  try {
    const auto header = detail::read_header(is, "STLB", kCheckpointVersion);
    ModelParams p = shaped(config_from(header.json));
    std::uint64_t expected = 0;
    for_each_tensor(p, [&](std::string_view, const auto& t) { expected += static_cast<std::uint64_t>(t.size()) * 4; });
    const std::uint64_t actual = detail::remaining_bytes(is);
    if (actual != expected)
      throw ModelError("checkpoint payload size mismatch: expected " + std::to_string(expected) + " bytes, got " +
                       std::to_string(actual));
    for_each_tensor(p, [&](std::string_view, auto& t) {
      detail::read_f32(is, std::span<float>(t.data(), static_cast<std::size_t>(t.size())));
    });
    return p;
  } catch (const detail::FormatError& e) {
    throw ModelError(std::string("checkpoint: ") + e.what());
  }
}

ModelParams load_params(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ModelError("cannot open checkpoint: " + path.string());
  return load_params(is);
}

std::string serialize_params(const ModelParams& params) {
  std::ostringstream os(std::ios::binary);
  save_params(params, os);
  return std::move(os).str();
}

std::string params_hash(const ModelParams& params) { return sha256_hex(serialize_params(params)); }

}  // namespace steerlab
