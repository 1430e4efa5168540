#pragma once

#include "proxbin/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace proxbin {

/// One bit per weight, LSB-first within each byte; bit 1 means positive.
struct PackedBinaryTensor {
    Shape shape;
    float scale = 1.0f;
    std::vector<std::uint8_t> bits;

    std::size_t numel() const { return shape_numel(shape); }
};

/// Requires every w_i == +s or -s; throws PackError naming the first offender.
PackedBinaryTensor pack_weights(const Tensor& w, double s);
Tensor unpack_weights(const PackedBinaryTensor& packed);

struct PackedLayer {
    std::string name;
    PackedBinaryTensor data;
};

/// "BQW1", u32 layer count, then per layer: u32 name length, name bytes, u8
/// rank, u32 dims, f32 scale, payload. Little-endian.
void write_bqw(const std::filesystem::path& path, const std::vector<PackedLayer>& layers);
std::vector<PackedLayer> read_bqw(const std::filesystem::path& path);

/// Bytes a layer takes in a .bqw file, header included.
std::size_t bqw_layer_bytes(const PackedLayer& layer);
constexpr std::size_t bqw_file_header_bytes = 8;

struct MemoryRow {
    std::string name;
    std::size_t numel = 0;
    std::size_t fp_bytes = 0;      ///< 32-bit floats
    std::size_t stored_bytes = 0;  ///< bytes in the deployed form
    bool binary = false;
};

struct MemoryReport {
    std::vector<MemoryRow> rows;
    std::size_t total_fp_bytes = 0;
    std::size_t total_stored_bytes = 0;

    double ratio() const;
};

/// Per-layer comparison for a packed model. Tensors in `checkpoint` that are
/// not in the .bqw file are counted as full precision on both sides. Throws
/// FormatError for a corrupt file and ConfigError for an empty model.
MemoryReport report_memory(const std::filesystem::path& bqw,
                           const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

} // namespace proxbin
