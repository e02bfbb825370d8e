#pragma once

#include <filesystem>

#include "snaplab/tensor.hpp"

namespace snaplab {

/// NumPy .npy (format 1.0, little-endian float64, C order) reader/writer.
void write_npy(const std::filesystem::path& path, const Tensor& t);
Tensor read_npy(const std::filesystem::path& path);

}  // namespace snaplab
