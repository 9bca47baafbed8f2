#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "delta/binary_io.hpp"
#include "delta/model.hpp"

namespace delta {

// Checkpoint container, little-endian:
//
//   "DLTA"  u32 version(=1)
//   u32 spec_len, spec JSON bytes
//   u32 n_params, then n_params records
//   u32 n_source, then n_source records            (ω*; 0 before transfer)
//
// record: u32 name_len, name, u8 is_head, u32 rank, u64 dims[rank], f64 values[prod(dims)]
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const ConvNetModel& model);
ConvNetModel deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ConvNetModel& model, const std::filesystem::path& path);
ConvNetModel load_checkpoint(const std::filesystem::path& path);

}  // namespace delta
