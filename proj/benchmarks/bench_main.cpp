#include <benchmark/benchmark.h>

#include <random>

#include "dpcc/entropy.hpp"
#include "dpcc/sparse_nn.hpp"

using namespace dpcc;

namespace {

std::vector<Coord3> bench_coords(std::size_t n, int bit_depth) {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<std::uint32_t> d(0, (1u << bit_depth) - 1);
    std::vector<MortonKey> keys;
    keys.reserve(n);
    while (keys.size() < n) keys.push_back(morton_encode({d(rng), d(rng), d(rng)}));
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    std::vector<Coord3> coords(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) coords[i] = morton_decode(keys[i]);
    return coords;
}

void bm_morton_encode(benchmark::State& state) {
    const auto coords = bench_coords(100000, 10);
    for (auto _ : state) {
        MortonKey acc = 0;
        for (const Coord3& c : coords) acc ^= morton_encode(c);
        benchmark::DoNotOptimize(acc);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(coords.size()));
}
BENCHMARK(bm_morton_encode);

void bm_morton_map_lookup(benchmark::State& state) {
    const auto coords = bench_coords(100000, 10);
    const MortonMap map(coords);
    for (auto _ : state) {
        std::int64_t acc = 0;
        for (const Coord3& c : coords) acc += map.find(morton_encode(c));
        benchmark::DoNotOptimize(acc);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(coords.size()));
}
BENCHMARK(bm_morton_map_lookup);

void bm_sparse_conv(benchmark::State& state) {
    const int channels = static_cast<int>(state.range(0));
    const auto coords = bench_coords(20000, 8);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<float> fd(-1.0f, 1.0f);
    std::vector<float> feats(coords.size() * static_cast<std::size_t>(channels));
    for (float& f : feats) f = fd(rng);
    const Traced in =
        constant(SparseTensor3::from_sorted(coords, std::move(feats), channels, 8));
    ConvKernel k = ConvKernel::make(3, channels, channels);
    for (float& w : k.weights) w = fd(rng);
    for (auto _ : state) {
        Traced out = sparse_conv(nullptr, in, k, coords, 8);
        benchmark::DoNotOptimize(out.value.feats().data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(coords.size()));
}
BENCHMARK(bm_sparse_conv)->Arg(4)->Arg(8)->Arg(16);

void bm_range_coder(benchmark::State& state) {
    std::mt19937_64 rng(13);
    const std::size_t n = 100000;
    std::vector<QuantProb> probs(n);
    std::vector<std::uint8_t> bits(n);
    std::uniform_int_distribution<std::uint32_t> pd(1, 65535);
    for (std::size_t i = 0; i < n; ++i) {
        probs[i] = QuantProb{static_cast<std::uint16_t>(pd(rng))};
        bits[i] = std::bernoulli_distribution(probs[i].p16 / 65536.0)(rng) ? 1 : 0;
    }
    for (auto _ : state) {
        RangeEncoder enc;
        for (std::size_t i = 0; i < n; ++i) enc.encode_bit(probs[i], bits[i]);
        const auto payload = enc.finish();
        RangeDecoder dec(payload);
        std::uint32_t acc = 0;
        for (std::size_t i = 0; i < n; ++i)
            acc += static_cast<std::uint32_t>(dec.decode_bit(probs[i]));
        benchmark::DoNotOptimize(acc);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * 2);
}
BENCHMARK(bm_range_coder);

}  // namespace

BENCHMARK_MAIN();
