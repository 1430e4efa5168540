#include "proxbin/packing.hpp"

#include "binary_io.hpp"
#include "proxbin/checkpoint.hpp"
#include "proxbin/errors.hpp"

#include <limits>
#include <set>

namespace proxbin {

PackedBinaryTensor pack_weights(const Tensor& w, double s) {
    PackedBinaryTensor packed;
    packed.shape = w.shape();
    packed.scale = static_cast<float>(s);
    packed.bits.assign((w.numel() + 7) / 8, 0);
    for (std::size_t i = 0; i < w.numel(); ++i) {
        const double v = w[i];
        if (v == s) {
            packed.bits[i / 8] = static_cast<std::uint8_t>(packed.bits[i / 8] | (1u << (i % 8)));
        } else if (v != -s) {
            throw PackError("pack_weights: element " + std::to_string(i) + " = " + std::to_string(v) +
                                " is not +-" + std::to_string(s),
                            i);
        }
    }
    return packed;
}

Tensor unpack_weights(const PackedBinaryTensor& packed) {
    const std::size_t n = packed.numel();
    if (packed.bits.size() != (n + 7) / 8) throw FormatError("packed payload does not match its shape");
    Tensor w(packed.shape);
    const double s = packed.scale;
    for (std::size_t i = 0; i < n; ++i) w[i] = (packed.bits[i / 8] >> (i % 8)) & 1u ? s : -s;
    return w;
}

std::size_t bqw_layer_bytes(const PackedLayer& layer) {
    return 4 + layer.name.size() + 1 + 4 * layer.data.shape.size() + 4 + layer.data.bits.size();
}

void write_bqw(const std::filesystem::path& path, const std::vector<PackedLayer>& layers) {
    std::ofstream out = detail::open_output(path);
    out.write("BQW1", 4);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(layers.size()));
    for (const PackedLayer& layer : layers) {
        if (layer.data.shape.size() > 255) throw DimensionError("rank too large for the BQW format");
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(layer.name.size()));
        out.write(layer.name.data(), static_cast<std::streamsize>(layer.name.size()));
        detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(layer.data.shape.size()));
        for (std::size_t d : layer.data.shape) {
            if (d > std::numeric_limits<std::uint32_t>::max()) throw DimensionError("dimension too large for BQW");
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        }
        detail::put_f32(out, layer.data.scale);
        out.write(reinterpret_cast<const char*>(layer.data.bits.data()),
                  static_cast<std::streamsize>(layer.data.bits.size()));
    }
    if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

std::vector<PackedLayer> read_bqw(const std::filesystem::path& path) {
    const std::vector<unsigned char> bytes = detail::read_file(path);
    detail::ByteReader r(bytes, path.string());
    if (bytes.size() < 4 || r.text(4) != "BQW1") throw FormatError("'" + path.string() + "' is not a BQW1 file (bad magic)");
    const std::uint32_t count = r.le<std::uint32_t>();
    std::vector<PackedLayer> layers;
    for (std::uint32_t k = 0; k < count; ++k) {
        PackedLayer layer;
        layer.name = r.text(r.le<std::uint32_t>());
        const std::uint8_t rank = r.le<std::uint8_t>();
        for (std::uint8_t d = 0; d < rank; ++d) layer.data.shape.push_back(r.le<std::uint32_t>());
        layer.data.scale = r.f32();
        const std::size_t payload = (layer.data.numel() + 7) / 8;
        const unsigned char* p = r.take(payload);
        layer.data.bits.assign(p, p + payload);
        layers.push_back(std::move(layer));
    }
    if (r.remaining() != 0) throw FormatError("'" + path.string() + "' has trailing bytes");
    return layers;
}

double MemoryReport::ratio() const {
    return total_stored_bytes == 0 ? 0.0 : static_cast<double>(total_fp_bytes) / static_cast<double>(total_stored_bytes);
}

MemoryReport report_memory(const std::filesystem::path& bqw, const std::optional<std::filesystem::path>& checkpoint) {
    const std::vector<PackedLayer> packed = read_bqw(bqw);
    MemoryReport report;
    std::set<std::string> seen;
    report.total_stored_bytes = bqw_file_header_bytes;
    for (const PackedLayer& layer : packed) {
        MemoryRow row;
        row.name = layer.name;
        row.numel = layer.data.numel();
        row.fp_bytes = 4 * row.numel;
        row.stored_bytes = bqw_layer_bytes(layer);
        row.binary = true;
        seen.insert(layer.name);
        report.rows.push_back(row);
    }
    if (checkpoint) {
        for (const NamedTensor& t : load_checkpoint(*checkpoint)) {
            if (seen.count(t.name)) continue;
            MemoryRow row;
            row.name = t.name;
            row.numel = t.value.numel();
            row.fp_bytes = row.stored_bytes = 4 * row.numel;
            report.rows.push_back(row);
        }
    }
    if (report.rows.empty()) throw ConfigError("'" + bqw.string() + "' describes an empty model");
    for (const MemoryRow& row : report.rows) {
        report.total_fp_bytes += row.fp_bytes;
        report.total_stored_bytes += row.stored_bytes;
    }
    return report;
}

} // namespace proxbin
