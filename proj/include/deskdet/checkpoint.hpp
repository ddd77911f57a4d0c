#pragma once

#include <map>
#include <string>

#include "deskdet/array.hpp"

namespace deskdet {

/// Flat named-tensor container. Little-endian binary:
///   magic "DDCKPT01", u64 entry count, then per entry
///   u32 name length, name bytes, u32 ndim, u32 dims..., raw float64 data.
/// Entries are written in key order; load(save(x)) == x bit-exactly.
void write_checkpoint(const std::string& path, const std::map<std::string, Array>& entries);
std::map<std::string, Array> read_checkpoint(const std::string& path);

}  // namespace deskdet
