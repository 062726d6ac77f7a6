#pragma once

#include <filesystem>
#include <iosfwd>

#include "icd/tensor.hpp"

namespace icd {

// Flat binary tensor container used by checkpoints, gram dumps and dataset
// fixtures: magic "ICDT", one version byte (1), rank and extents as 64-bit
// little-endian integers, then the values as little-endian IEEE-754 doubles.

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace icd
