#include "proxbin/data.hpp"

#include "binary_io.hpp"
#include "proxbin/errors.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace proxbin {

Shape Dataset::sample_shape() const {
    if (images.rank() != 4) return {};
    return {images.dim(1), images.dim(2), images.dim(3)};
}

namespace {

constexpr std::uint32_t idx_images_magic = 0x00000803;
constexpr std::uint32_t idx_labels_magic = 0x00000801;

std::string hex(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", v);
    return buf;
}

} // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const std::vector<unsigned char> ib = detail::read_file(images);
    const std::vector<unsigned char> lb = detail::read_file(labels);
    detail::ByteReader ir(ib, images.string());
    detail::ByteReader lr(lb, labels.string());

    const std::uint32_t im = ir.be<std::uint32_t>();
    if (im != idx_images_magic) {
        throw FormatError("'" + images.string() + "': magic " + hex(im) + ", expected " + hex(idx_images_magic));
    }
    const std::uint32_t lm = lr.be<std::uint32_t>();
    if (lm != idx_labels_magic) {
        throw FormatError("'" + labels.string() + "': magic " + hex(lm) + ", expected " + hex(idx_labels_magic));
    }
    const std::size_t n = ir.be<std::uint32_t>();
    const std::size_t rows = ir.be<std::uint32_t>();
    const std::size_t cols = ir.be<std::uint32_t>();
    const std::size_t nl = lr.be<std::uint32_t>();
    if (n != nl) {
        throw FormatError("IDX files disagree: " + std::to_string(n) + " images, " + std::to_string(nl) + " labels");
    }
    const unsigned char* pixels = ir.take(n * rows * cols);
    const unsigned char* raw_labels = lr.take(n);

    Dataset d;
    d.name = images.stem().string();
    d.images = Tensor(Shape{n, 1, rows, cols});
    for (std::size_t i = 0; i < n * rows * cols; ++i) d.images[i] = pixels[i] / 255.0;
    d.labels.assign(raw_labels, raw_labels + n);
    d.num_classes = n == 0 ? 0 : static_cast<std::size_t>(*std::max_element(d.labels.begin(), d.labels.end())) + 1;
    return d;
}

Dataset load_cifar_bin(const std::filesystem::path& path, bool coarse) {
    const std::vector<unsigned char> bytes = detail::read_file(path);
    constexpr std::size_t pixels = 3 * 32 * 32;
    const std::size_t record = pixels + (coarse ? 2 : 1);
    if (bytes.size() % record != 0) {
        throw FormatError("'" + path.string() + "': " + std::to_string(bytes.size()) +
                          " bytes is not a multiple of the record size " + std::to_string(record));
    }
    const std::size_t n = bytes.size() / record;
    Dataset d;
    d.name = coarse ? "cifar100" : "cifar10";
    d.split = path.stem().string();
    d.num_classes = coarse ? 100 : 10;
    d.images = Tensor(Shape{n, 3, 32, 32});
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = bytes.data() + i * record;
        const int label = coarse ? rec[1] : rec[0];
        if (static_cast<std::size_t>(label) >= d.num_classes) {
            throw FormatError("'" + path.string() + "': label " + std::to_string(label) + " in record " +
                              std::to_string(i));
        }
        d.labels[i] = label;
        const unsigned char* px = rec + (coarse ? 2 : 1);
        for (std::size_t k = 0; k < pixels; ++k) d.images[i * pixels + k] = px[k] / 255.0;
    }
    return d;
}

Dataset synthetic_blobs(std::size_t n, std::size_t classes, std::size_t dim, std::uint64_t seed, double spread) {
    if (classes < 2) throw ConfigError("synthetic_blobs needs at least two classes");
    if (dim == 0) throw ConfigError("synthetic_blobs needs dim >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, spread);
    std::vector<double> means(classes * dim);
    for (double& m : means) m = unit(rng);

    Dataset d;
    d.name = "blobs";
    d.num_classes = classes;
    d.images = Tensor(Shape{n, 1, 1, dim});
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % classes;
        d.labels[i] = static_cast<int>(c);
        for (std::size_t k = 0; k < dim; ++k) d.images[i * dim + k] = std::clamp(means[c * dim + k] + noise(rng), 0.0, 1.0);
    }
    return d;
}

Dataset slice(const Dataset& data, std::size_t begin, std::size_t end) {
    end = std::min(end, data.size());
    begin = std::min(begin, end);
    Dataset out;
    out.name = data.name;
    out.split = data.split;
    out.num_classes = data.num_classes;
    const Shape sample = data.sample_shape();
    const std::size_t per = shape_numel(sample);
    Shape shape{end - begin};
    shape.insert(shape.end(), sample.begin(), sample.end());
    std::vector<double> values(data.images.values().begin() + static_cast<std::ptrdiff_t>(begin * per),
                               data.images.values().begin() + static_cast<std::ptrdiff_t>(end * per));
    out.images = Tensor(shape, std::move(values));
    out.labels.assign(data.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      data.labels.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

Batch gather(const Dataset& data, const std::vector<std::size_t>& indices) {
    const Shape sample = data.sample_shape();
    const std::size_t per = shape_numel(sample);
    Shape shape{indices.size()};
    shape.insert(shape.end(), sample.begin(), sample.end());
    Batch b;
    b.images = Tensor(shape);
    b.labels.reserve(indices.size());
    for (std::size_t j = 0; j < indices.size(); ++j) {
        const std::size_t i = indices[j];
        if (i >= data.size()) throw IndexError("sample index " + std::to_string(i) + " out of range");
        std::copy_n(data.images.data().begin() + static_cast<std::ptrdiff_t>(i * per), per,
                    b.images.data().begin() + static_cast<std::ptrdiff_t>(j * per));
        b.labels.push_back(data.labels[i]);
    }
    return b;
}

BatchIterator::BatchIterator(const Dataset& data, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : data_(data), batch_size_(batch_size), shuffle_(shuffle), rng_(seed) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    order_.resize(data.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    epoch_ = 0;
    start_epoch();
}

void BatchIterator::start_epoch() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (shuffle_) {
        for (std::size_t i = order_.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng_() % i);
            std::swap(order_[i - 1], order_[j]);
        }
    }
    cursor_ = 0;
    ++epoch_;
}

bool BatchIterator::next(Batch& out) {
    if (cursor_ >= order_.size()) return false;
    const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
    std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    out = gather(data_, idx);
    return true;
}

} // namespace proxbin
