#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blockkd/nn.hpp"

namespace bkd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout, all integers and floats little-endian:
///
///   "BKDC" | u32 version | u32 count
///   count x { u16 name_len | name | u8 ndim | ndim x u32 dim | numel x f64 }
///   u64 checksum = sum of all f64 payload bytes, mod 2^64
struct CheckpointEntry {
  std::string name;
  Shape shape;  // empty for scalars
  std::vector<double> values;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries);
/// FormatError for malformed bytes, IntegrityError for a checksum mismatch,
/// CompatibilityError for an unknown version.
std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes);
/// Encoded size in bytes.
std::size_t checkpoint_size(const std::vector<CheckpointEntry>& entries);

enum class NetRole { teacher, student };

struct CheckpointMeta {
  std::uint64_t arch_hash = 0;
  std::uint64_t seed = 0;
  int epoch = 0;
  NetRole role = NetRole::student;
};

/// Network state (parameters, then batch-norm buffers) followed by
/// "meta/..." entries holding `meta`.
std::vector<CheckpointEntry> checkpoint_entries(const CompositeNet& net, const CheckpointMeta& meta);

void save_checkpoint(const CompositeNet& net, const std::string& path, const CheckpointMeta& meta);

struct LoadedNet {
  CompositeNet net;
  CheckpointMeta meta;
};

/// Rebuilds the `role` network of `arch` and fills it from the file. The
/// architecture hash, role and every tensor name and shape must match.
/// Teachers come back frozen.
LoadedNet load_checkpoint(const std::string& path, const ArchSpec& arch, NetRole role);

}  // namespace bkd
