#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "versebyte/model.hpp"

namespace versebyte {

// Container layout, all integers little-endian:
//   "VBT1" | u32 version | u64 config_len | config JSON (sorted keys)
//   | u64 n_blobs | n_blobs x (u64 byte_len | float32 data) | u32 CRC-32
// Blobs follow parameter_layout() order. The CRC covers every preceding byte.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const ModelParams<float>& params);
ModelParams<float> deserialize_checkpoint(std::string_view bytes);

// Writes through a temporary file and renames, so readers never see a partial
// checkpoint.
void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path);
ModelParams<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace versebyte
