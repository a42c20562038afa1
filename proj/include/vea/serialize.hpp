#pragma once

#include <iosfwd>
#include <string>

#include "vea/tensor.hpp"

namespace vea {

/// Writes `shape: d0 d1 ...\n` followed by the little-endian float64 payload.
void write_tensor(std::ostream& os, const Tensor& t);

/// Reads one tensor record written by write_tensor. Throws IoError on a
/// malformed header or truncated payload.
Tensor read_tensor(std::istream& is);

/// Atomic text/binary file writes: write to `<path>.tmp`, then rename.
void atomic_write_file(const std::string& path, const std::string& contents);

std::string read_text_file(const std::string& path);
bool file_exists(const std::string& path);

}  // namespace vea
