#include "proxbin/autodiff.hpp"
#include "proxbin/decomposition.hpp"
#include "proxbin/packing.hpp"
#include "proxbin/quantizers.hpp"

#include <benchmark/benchmark.h>

#include <random>

namespace {

using namespace proxbin;

Tensor random_tensor(Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = n(rng);
    return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
    const auto channels = static_cast<std::size_t>(state.range(0));
    const Tensor x = random_tensor({8, channels, 28, 28}, 1);
    const Tensor k = random_tensor({channels * 2, channels, 3, 3}, 2);
    for (auto _ : state) {
        Tape tape;
        const Var kv = tape.leaf(k);
        tape.backward(sum(conv2d(tape.constant(x), kv, 1, 1)));
        benchmark::DoNotOptimize(kv.grad().data().data());
    }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_QuantizerPair(benchmark::State& state, const char* name) {
    const QuantizerPair pair = make_pair(name);
    const Tensor w = random_tensor({1 << 16}, 3);
    for (auto _ : state) {
        double acc = 0.0;
        for (double v : w.data()) acc += pair.forward(v) * pair.backward(v);
        benchmark::DoNotOptimize(acc);
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * static_cast<std::int64_t>(w.numel()));
}
BENCHMARK_CAPTURE(BM_QuantizerPair, bc, "bc");
BENCHMARK_CAPTURE(BM_QuantizerPair, pc, "pc");
BENCHMARK_CAPTURE(BM_QuantizerPair, bnn_plus_plus, "bnn++");
BENCHMARK_CAPTURE(BM_QuantizerPair, ede_plus, "ede+");

void BM_PackUnpack(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Tensor w({n});
    std::mt19937_64 rng(4);
    for (double& v : w.data()) v = (rng() & 1) ? 0.5 : -0.5;
    for (auto _ : state) {
        const PackedBinaryTensor p = pack_weights(w, 0.5);
        benchmark::DoNotOptimize(unpack_weights(p).data().data());
    }
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) * static_cast<std::int64_t>(n) * 4);
}
BENCHMARK(BM_PackUnpack)->Arg(1 << 12)->Arg(1 << 20);

void BM_IntegrateP(benchmark::State& state, const char* name) {
    const QuantizerPair pair = make_pair(name);
    for (auto _ : state) benchmark::DoNotOptimize(integrate_P(pair).values.data());
}
BENCHMARK_CAPTURE(BM_IntegrateP, bnn, "bnn")->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_IntegrateP, bnn_plus_plus, "bnn++")->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
