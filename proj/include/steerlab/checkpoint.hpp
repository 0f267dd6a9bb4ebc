#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "steerlab/model.hpp"

namespace steerlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Canonical (sorted-key) JSON for a model configuration.
std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

/// "STLB" checkpoint: magic, u32 version, u64-prefixed config JSON, then
/// every tensor as little-endian f32 in declaration order.
void save_params(const ModelParams& params, std::ostream& os);
void save_params(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_params(std::istream& is);
ModelParams load_params(const std::filesystem::path& path);

/// Serialized checkpoint bytes, used for hashing and equality checks.
std::string serialize_params(const ModelParams& params);
std::string params_hash(const ModelParams& params);

}  // namespace steerlab
