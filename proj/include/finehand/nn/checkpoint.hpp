#pragma once

// Binary checkpoint: "FHCKPT1\n", u64 header length, JSON header
// {config, params: [{name, rows, cols}]}, then float32 values per param
// in declaration order (column-major).

#include <filesystem>
#include <map>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "finehand/nn/layers.hpp"

namespace finehand::nn {

struct Checkpoint {
  nlohmann::json config;
  std::map<std::string, Matrix> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     std::span<const Param* const> params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies matching tensors into params; throws InputError on a missing name
/// or shape mismatch.
void restore(const Checkpoint& ckpt, std::span<Param* const> params);

}  // namespace finehand::nn
