#pragma once

#include <filesystem>

#include "finehand/nn/layers.hpp"

namespace finehand {

/// NPY v1.0, little-endian float32, C order (row = frame).
void write_npy(const std::filesystem::path& path, const nn::Matrix& matrix);
nn::Matrix read_npy(const std::filesystem::path& path);

}  // namespace finehand
