// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers little-endian):
//   "DQWC" | u32 version | u32 n | n bytes JSON metadata | u32 tensor count |
//   records: u16 name length | name | u8 dtype | u8 rank | u32 extents[rank] | payload
// Payloads: f64 and f32 are IEEE values; q8 is one signed byte per element
// followed by the f32 scale.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "dq/model.hpp"

namespace dq {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public CorruptionError {
 public:
  enum class Kind { BadMagic, BadVersion, Truncated, UnknownDtype, BadContent };
  CheckpointError(Kind kind, const std::string& what) : CorruptionError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// In-memory image of save_checkpoint(). Q8 requires a model produced by
/// finalize_quantized(); codes of +2^(n-1) that do not fit a signed byte are
/// stored as +127 and reported on stderr. Tensors without codes fall back to f32.
std::string serialize_checkpoint(const SeqModel& model, StorageDtype dtype);
SeqModel deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const SeqModel& model, const std::filesystem::path& path, StorageDtype dtype);
SeqModel load_checkpoint(const std::filesystem::path& path);

}  // namespace dq
