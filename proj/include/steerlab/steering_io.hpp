#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "steerlab/steering.hpp"

namespace steerlab {

inline constexpr std::uint32_t kSteeringVersion = 1;
inline constexpr std::uint32_t kDiffSetVersion = 1;

/// "STRM": header {alpha, clusters, dim, labels, num_layers, reduction,
/// site}; payload centroids (cluster, layer, dim order), then per layer the
/// probe weight (C x D) and bias (C), all little-endian f32.
void save_steering_model(const SteeringModel& model, std::ostream& os);
void save_steering_model(const SteeringModel& model, const std::filesystem::path& path);
SteeringModel load_steering_model(std::istream& is);
SteeringModel load_steering_model(const std::filesystem::path& path);

/// "DSET": header {count, dim, ids, num_layers, reduction, site}; payload
/// prompt-major deltas (prompt, layer, dim) as little-endian f32.
void save_diffset(const DiffSet& diffs, std::ostream& os);
void save_diffset(const DiffSet& diffs, const std::filesystem::path& path);
DiffSet load_diffset(std::istream& is);
DiffSet load_diffset(const std::filesystem::path& path);

/// One row per prompt: id, then the flattened delta (layer-major).
void write_diff_csv(const DiffSet& diffs, std::ostream& out);
/// One row per layer: "layer,mean_l2_norm".
void write_norm_profile_csv(const std::vector<double>& profile, std::ostream& out);

}  // namespace steerlab
