#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smelab/model.hpp"

namespace smelab {

// Binary layout, little-endian:
//   "SMEL"  u32 version
//   u32 field count, then per field: u32 name length, name bytes, i64 value
//   every core tensor in declaration order as raw float64 (shapes follow
//   from the config)
//   trailer sections: 4-byte tag, u64 payload length, payload
// The patch set is always stored in a "PTCH" section.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointSection {
  std::string tag;  // exactly four bytes
  std::vector<std::uint8_t> payload;
};

std::vector<std::uint8_t> encode_checkpoint(const TransformerModel& model,
                                            std::span<const CheckpointSection> extra = {});
void save_checkpoint(const std::string& path, const TransformerModel& model,
                     std::span<const CheckpointSection> extra = {});

struct LoadedCheckpoint {
  TransformerModel model;
  // Trailer sections other than the patch set, in file order.
  std::vector<CheckpointSection> sections;

  const CheckpointSection* find(const std::string& tag) const;
};

// Throws FormatError on malformed data and VersionMismatch on an unknown
// version.
LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
LoadedCheckpoint load_checkpoint(const std::string& path);

std::vector<std::uint8_t> encode_patches(const PatchSet& patches);
PatchSet decode_patches(const std::vector<std::uint8_t>& payload);

}  // namespace smelab
