#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "stda/nn.hpp"

namespace stda {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// File layout: 8-byte magic "STDACKPT", u32 little-endian header length, a
/// JSON header {format_version, dtype, config, meta, arrays: [{name, shape,
/// offset, nbytes}]}, then the concatenated little-endian f32 arrays.
struct Checkpoint {
  nlohmann::json config;
  nlohmann::json meta;
  std::vector<CheckpointArray> arrays;

  const CheckpointArray* find(const std::string& name) const;
};

// Parameters followed by state buffers, in collection order.
Checkpoint snapshot(const nn::ParamSet<float>& set, nlohmann::json config = {}, nlohmann::json meta = {});

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies arrays into the set. Any missing, unexpected or reshaped entry fails
/// with a listing of every difference.
void restore(nn::ParamSet<float>& set, const Checkpoint& ckpt);

}  // namespace stda
