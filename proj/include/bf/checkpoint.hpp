#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bf/tensor.hpp"

namespace bf {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Binary parameter checkpoint, all little-endian:
//   magic "BFCK1" (5 bytes)
//   u32 parameter count
//   per parameter: u32 name length, UTF-8 name bytes, u32 rank,
//                  u32 dims[rank], f32 data[prod(dims)]
// Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> params);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace bf
