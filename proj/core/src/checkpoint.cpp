#include "proxbin/checkpoint.hpp"

#include "binary_io.hpp"
#include "proxbin/errors.hpp"

#include <json.hpp>

#include <fstream>

namespace proxbin {

using nlohmann::json;

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    json manifest;
    manifest["format"] = "proxbin-checkpoint";
    manifest["version"] = 1;
    manifest["dtype"] = "f32";
    manifest["tensors"] = json::array();
    std::size_t offset = 0;
    {
        std::ofstream blob = detail::open_output(path);
        for (const NamedTensor& t : tensors) {
            manifest["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}});
            for (double v : t.value.data()) detail::put_f32(blob, static_cast<float>(v));
            offset += 4 * t.value.numel();
        }
        if (!blob) throw FormatError("failed writing '" + path.string() + "'");
    }
    std::ofstream side = detail::open_output(path.string() + ".json");
    side << manifest.dump(2) << '\n';
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    const std::filesystem::path side_path = path.string() + ".json";
    std::ifstream side(side_path);
    if (!side) throw FormatError("missing checkpoint manifest '" + side_path.string() + "'");
    json manifest;
    try {
        side >> manifest;
    } catch (const json::exception& e) {
        throw FormatError("checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "proxbin-checkpoint" || manifest.value("dtype", "") != "f32") {
        throw FormatError("'" + side_path.string() + "' is not an f32 proxbin checkpoint manifest");
    }
    const std::vector<unsigned char> bytes = detail::read_file(path);
    std::vector<NamedTensor> out;
    for (const json& entry : manifest.at("tensors")) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const std::size_t n = shape_numel(shape);
        if (offset + 4 * n > bytes.size()) throw FormatError("checkpoint blob truncated at tensor '" + t.name + "'");
        std::vector<unsigned char> slice(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                         bytes.begin() + static_cast<std::ptrdiff_t>(offset + 4 * n));
        detail::ByteReader r(slice, path.string());
        t.value = Tensor(shape);
        for (double& v : t.value.data()) v = r.f32();
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace proxbin
