#pragma once

// Versioned checkpoint container shared by models, position heads and
// resumable training state. Layout (little-endian):
//
//   "IDDC" | u32 version | u64 len | header JSON (len bytes, UTF-8)
//   | u64 block_count
//   | block_count × ( u64 len | name | u64 count | f32[count] )
//
// The header carries at least {"kind"}. See docs/FORMATS.md for the kinds.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idd/binary_io.hpp"

namespace idd {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, std::vector<float>> blocks;

  const std::vector<float>& block(const std::string& name) const;
  bool has_block(const std::string& name) const { return blocks.contains(name); }
};

/// Written to a temporary sibling and renamed, so an interrupted write never
/// replaces a valid checkpoint with a partial one.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace idd
