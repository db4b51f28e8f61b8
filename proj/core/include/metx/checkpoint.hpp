#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metx/config.hpp"
#include "metx/model.hpp"

namespace metx {

/// Binary checkpoint: "METX1" magic, u32 format version, the config snapshot
/// as config text, then the ordered parameter list (name, shape, little-
/// endian f32 payload) and a trailing FNV-1a 64 checksum over all payload
/// bytes. Round-trips are byte-exact.
struct Checkpoint {
  RunConfig config;
  std::vector<std::pair<std::string, Tensor>> params;
};

void save_checkpoint(const std::string& path, const RunConfig& config,
                     const ModelParams& params);

Checkpoint load_checkpoint(const std::string& path);

/// Copies checkpoint tensors into an initialized ModelParams; names, order
/// and shapes must match exactly.
void load_into(ModelParams& params, const Checkpoint& checkpoint);

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed);

}  // namespace metx
