#pragma once

#include "proxbin/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace proxbin {

struct NamedTensor {
    std::string name;
    Tensor value;
};

/// Raw little-endian f32 blob at `path` and a JSON manifest at `path` + ".json"
/// listing each tensor's shape and offset.
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

} // namespace proxbin
