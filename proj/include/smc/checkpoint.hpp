#pragma once

#include <cstdint>
#include <string>

#include "smc/params.hpp"

namespace smc {

/// Checkpoint layout (version 1): a text header
///   smc-checkpoint v1
///   hash <16 hex digits of the config text>
///   step <n>
///   config <byte count>
///   <config text>
///   tensors <count>
///   <name> f32 <rank> <dims...>        (one line per tensor, header order)
///   payload
/// followed by every tensor's values as little-endian float32 in header
/// order. save -> load -> save reproduces the file byte for byte.
void save_checkpoint(const std::string& path, const ParamRegistry& reg,
                     const std::string& config_text, std::int64_t step);

/// Architecture snapshot without loading tensor data.
std::string read_checkpoint_config(const std::string& path);

/// Loads values into an already-built registry; names, order and shapes
/// must match the header exactly. Returns the stored step counter.
std::int64_t load_checkpoint(const std::string& path, ParamRegistry& reg);

}  // namespace smc
