#include "proxbin/checkpoint.hpp"
#include "proxbin/errors.hpp"
#include "proxbin/packing.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>

namespace proxbin {
namespace {

Tensor random_binary(Shape shape, double s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = (rng() & 1) ? s : -s;
    return t;
}

TEST(PackWeights, BitLayoutOracle) {
    const PackedBinaryTensor p = pack_weights(Tensor::vector({-1, 1, 1, -1, 1, -1, -1, 1}), 1.0);
    ASSERT_EQ(p.bits.size(), 1u);
    EXPECT_EQ(p.bits[0], 0b10010110);
}

TEST(PackWeights, ThousandElementRoundTrip) {
    const Tensor w = random_binary({1000}, 1.0, 1);
    const PackedBinaryTensor p = pack_weights(w, 1.0);
    EXPECT_EQ(p.bits.size(), 125u);
    EXPECT_EQ(unpack_weights(p), w);
}

TEST(PackWeights, RoundTripAllSizes) {
    for (std::size_t n = 1; n <= 4096; n += (n < 64 ? 1 : 37)) {
        const double s = 0.25 + 0.001 * static_cast<double>(n % 7);
        const Tensor w = random_binary({n}, static_cast<float>(s), n);
        const PackedBinaryTensor p = pack_weights(w, static_cast<float>(s));
        EXPECT_EQ(p.bits.size(), (n + 7) / 8);
        EXPECT_EQ(unpack_weights(p), w) << n;
    }
}

TEST(PackWeights, RejectsNonBinaryWithIndex) {
    try {
        pack_weights(Tensor::vector({1, -1, 0.5, 7}), 1.0);
        FAIL() << "accepted";
    } catch (const PackError& e) {
        EXPECT_EQ(e.index(), 2u);
    }
}

TEST(Bqw, FileRoundTrip) {
    testing::TempDir dir("bqw");
    std::vector<PackedLayer> layers{{"a.weight", pack_weights(random_binary({3, 5}, 0.5, 2), 0.5)},
                                    {"b.weight", pack_weights(random_binary({2, 2, 3, 3}, 1.0, 3), 1.0)}};
    write_bqw(dir / "m.bqw", layers);
    const std::vector<PackedLayer> back = read_bqw(dir / "m.bqw");
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back[i].name, layers[i].name);
        EXPECT_EQ(back[i].data.shape, layers[i].data.shape);
        EXPECT_EQ(back[i].data.scale, layers[i].data.scale);
        EXPECT_EQ(back[i].data.bits, layers[i].data.bits);
    }
    std::size_t expected = bqw_file_header_bytes;
    for (const PackedLayer& l : layers) expected += bqw_layer_bytes(l);
    EXPECT_EQ(std::filesystem::file_size(dir / "m.bqw"), expected);
}

TEST(Bqw, CorruptMagic) {
    testing::TempDir dir("bqw");
    write_bqw(dir / "m.bqw", {{"w", pack_weights(random_binary({16}, 1.0, 4), 1.0)}});
    std::fstream f(dir / "m.bqw", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
    f.close();
    EXPECT_THROW(read_bqw(dir / "m.bqw"), FormatError);
    EXPECT_THROW(report_memory(dir / "m.bqw"), FormatError);
}

TEST(Bqw, TruncatedPayload) {
    testing::TempDir dir("bqw");
    write_bqw(dir / "m.bqw", {{"w", pack_weights(random_binary({64}, 1.0, 4), 1.0)}});
    std::filesystem::resize_file(dir / "m.bqw", std::filesystem::file_size(dir / "m.bqw") - 1);
    EXPECT_THROW(read_bqw(dir / "m.bqw"), FormatError);
}

TEST(ReportMemory, MillionBinaryWeights) {
    testing::TempDir dir("mem");
    write_bqw(dir / "m.bqw", {{"w", pack_weights(random_binary({1000, 1000}, 1.0, 5), 1.0)}});
    const MemoryReport r = report_memory(dir / "m.bqw");
    EXPECT_EQ(r.total_fp_bytes, 4'000'000u);
    EXPECT_GE(r.total_stored_bytes, 125'000u);
    EXPECT_LT(r.total_stored_bytes, 125'100u);
    EXPECT_GT(r.ratio(), 31.9);
    EXPECT_LT(r.ratio(), 32.0);
}

TEST(ReportMemory, MixedPrecisionBelowThirtyTwo) {
    testing::TempDir dir("mem");
    write_bqw(dir / "m.bqw", {{"mid.weight", pack_weights(random_binary({256, 256}, 0.1, 6), 0.1)}});
    save_checkpoint(dir / "m.ckpt", {{"first.weight", Tensor({256, 64}, 0.5)},
                                     {"mid.weight", Tensor({256, 256}, 0.1)},
                                     {"last.weight", Tensor({10, 256}, 0.5)}});
    const MemoryReport r = report_memory(dir / "m.bqw", dir / "m.ckpt");
    ASSERT_EQ(r.rows.size(), 3u);
    EXPECT_TRUE(r.rows[0].binary);
    EXPECT_FALSE(r.rows[1].binary);
    EXPECT_EQ(r.rows[1].fp_bytes, r.rows[1].stored_bytes);
    EXPECT_LT(r.ratio(), 32.0);
    EXPECT_GT(r.ratio(), 1.0);
}

TEST(ReportMemory, EmptyModel) {
    testing::TempDir dir("mem");
    write_bqw(dir / "m.bqw", {});
    EXPECT_THROW(report_memory(dir / "m.bqw"), ConfigError);
}

TEST(Checkpoint, RoundTripIsFloat32) {
    testing::TempDir dir("ckpt");
    const Tensor a = Tensor::matrix({{0.1, -2.5}, {3.0, 1e-3}});
    save_checkpoint(dir / "c.ckpt", {{"a", a}, {"b", Tensor({3}, 7.0)}});
    const std::vector<NamedTensor> back = load_checkpoint(dir / "c.ckpt");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].name, "a");
    EXPECT_EQ(back[0].value.shape(), a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(back[0].value[i], static_cast<double>(static_cast<float>(a[i])));
    EXPECT_EQ(back[1].value, Tensor({3}, 7.0));
    EXPECT_TRUE(std::filesystem::exists(dir / "c.ckpt.json"));
}

TEST(Checkpoint, ShortBlobIsFormatError) {
    testing::TempDir dir("ckpt");
    save_checkpoint(dir / "c.ckpt", {{"a", Tensor({4}, 1.0)}});
    std::filesystem::resize_file(dir / "c.ckpt", 8);
    EXPECT_THROW(load_checkpoint(dir / "c.ckpt"), FormatError);
}

} // namespace
} // namespace proxbin
