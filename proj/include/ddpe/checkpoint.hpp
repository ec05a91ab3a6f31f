#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddpe/dynconv.hpp"

namespace ddpe {

// Flat little-endian binary:
//   "DDPE" | u32 version | u64 config length | config text (NetworkConfig::to_text)
//   then per parameter, in Model::parameters() order:
//   u32 name length | name | u32 rank | u64 extents[rank] | f32 values
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const Model<T>& model);

template <typename T>
Model<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);

} // namespace ddpe
