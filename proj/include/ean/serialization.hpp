#pragma once

#include <string>

#include "ean/tensor.hpp"

namespace ean {

// Binary tensor file format:
//   bytes 0-3   magic "EANT"
//   bytes 4-7   format version, u32 little-endian (currently 1)
//   byte  8     element kind: 0 = f32, 1 = f64
//   byte  9     rank
//   then rank x u64 little-endian extents
//   then row-major payload, IEEE-754 little-endian
// Readers reject unknown versions and malformed headers.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace ean
