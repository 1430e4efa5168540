#pragma once

#include "proxbin/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace proxbin {

/// Images [N,C,H,W] with values in [0,1] and integer labels.
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    std::string name;
    std::string split;
    std::size_t num_classes = 0;

    std::size_t size() const noexcept { return labels.size(); }
    /// [C,H,W] of one sample.
    Shape sample_shape() const;
};

/// Big-endian IDX pair: images magic 0x00000803, labels 0x00000801. Pixels are scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// CIFAR binary batches: 1 label byte + 3072 pixel bytes per record, or coarse
/// byte + fine byte + pixels when `coarse` (CIFAR-100; the fine label is kept).
Dataset load_cifar_bin(const std::filesystem::path& path, bool coarse = false);

/// Gaussian clusters around class means drawn in [0,1]^dim, clipped to [0,1].
/// Images have shape [n,1,1,dim].
Dataset synthetic_blobs(std::size_t n, std::size_t classes, std::size_t dim, std::uint64_t seed, double spread = 0.05);

/// Samples [begin, end) as a new dataset.
Dataset slice(const Dataset& data, std::size_t begin, std::size_t end);

struct Batch {
    Tensor images;
    std::vector<int> labels;
};

Batch gather(const Dataset& data, const std::vector<std::size_t>& indices);

/// Seeded mini-batches. Each epoch visits every index exactly once.
class BatchIterator {
public:
    BatchIterator(const Dataset& data, std::size_t batch_size, std::uint64_t seed, bool shuffle = true);

    /// Fills `out` with the next batch of the current epoch; false at the end of the epoch.
    bool next(Batch& out);
    /// Start the next epoch with a fresh permutation.
    void start_epoch();

    std::size_t epoch() const noexcept { return epoch_; }
    const std::vector<std::size_t>& order() const noexcept { return order_; }

private:
    const Dataset& data_;
    std::size_t batch_size_;
    bool shuffle_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
};

} // namespace proxbin
