#pragma once

#include <filesystem>
#include <stdexcept>

#include "hatnet/tensor.hpp"

namespace hatnet {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// HTNT tensor container, version 1. Byte layout, all little-endian:
//   bytes 0-3   magic "HTNT"
//   byte  4     version (0x01)
//   byte  5     dtype   (0x00 = float32)
//   byte  6     rank
//   then rank u32 extents, then row-major float32 payload.
void write_htnt(const std::filesystem::path& path, const Tensor& t);
Tensor read_htnt(const std::filesystem::path& path);

}  // namespace hatnet
