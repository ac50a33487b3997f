#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mltd/metaloop.hpp"
#include "mltd/tensor.hpp"

namespace mltd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Generic container: a JSON config blob plus named tensors.
///
/// File layout (little-endian):
///   "MLTDCKPT" | u32 version | u64 json length | json bytes
///   u32 record count | records sorted by name:
///     u32 name length | name | u8 dtype (0 f64, 1 f32) | u8 rank | u64 dims[rank] | u64 payload offset
///   payload (tensors back to back, offsets relative to its start)
///   u32 CRC-32 of every preceding byte
struct CheckpointData {
  std::string config_json;
  NamedTensors tensors;
};

/// Writes atomically: temp file, fsync, rename.
void write_checkpoint(const CheckpointData& data, const std::filesystem::path& path);
CheckpointData read_checkpoint(const std::filesystem::path& path);
/// The exact byte stream write_checkpoint produces.
std::string encode_checkpoint(const CheckpointData& data);
CheckpointData decode_checkpoint(std::string_view bytes);

/// Tensors "param/<key>", "adam.m/<key>", "adam.v/<key>"; the JSON blob
/// carries the model and overlay configs, optimizer scalars, meta
/// iteration, seed and sampler RNG state. With compact = true parameters
/// are stored as float32.
void save_checkpoint(const MetaState& state, const std::filesystem::path& path, bool compact = false);
MetaState load_checkpoint(const std::filesystem::path& path);

std::string encode_state_config(const MetaState& state);
CheckpointData state_to_checkpoint(const MetaState& state, bool compact = false);
MetaState checkpoint_to_state(const CheckpointData& data);

}  // namespace mltd
