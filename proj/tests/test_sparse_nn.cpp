#include <doctest.h>

#include <cmath>
#include <random>

#include "dpcc/sparse_nn.hpp"

using namespace dpcc;

namespace {

struct DenseGrid {
    int G = 0, C = 0;
    std::vector<double> v;  // zero where unoccupied
    double at(int x, int y, int z, int c) const {
        if (x < 0 || y < 0 || z < 0 || x >= G || y >= G || z >= G) return 0.0;
        return v[static_cast<std::size_t>(((x * G + y) * G + z) * C + c)];
    }
};

DenseGrid to_dense(const SparseTensor3& t, int G) {
    DenseGrid d;
    d.G = G;
    d.C = t.channels();
    d.v.assign(static_cast<std::size_t>(G) * G * G * d.C, 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
        const Coord3& c = t.coords()[i];
        for (int ch = 0; ch < d.C; ++ch)
            d.v[static_cast<std::size_t>(((c.x * G + c.y) * G + c.z) * d.C + ch)] =
                t.row(i)[ch];
    }
    return d;
}

SparseTensor3 random_tensor(std::mt19937_64& rng, int G, int C, int bit_depth,
                            double fill = 0.4) {
    std::uniform_real_distribution<float> fd(-1.0f, 1.0f);
    std::uniform_real_distribution<double> od(0.0, 1.0);
    std::vector<Coord3> coords;
    for (int x = 0; x < G; ++x)
        for (int y = 0; y < G; ++y)
            for (int z = 0; z < G; ++z)
                if (od(rng) < fill)
                    coords.push_back({static_cast<std::uint32_t>(x),
                                      static_cast<std::uint32_t>(y),
                                      static_cast<std::uint32_t>(z)});
    if (coords.empty()) coords.push_back({0, 0, 0});
    std::vector<float> feats(coords.size() * static_cast<std::size_t>(C));
    for (float& f : feats) f = fd(rng);
    return SparseTensor3::canonicalize(std::move(coords), std::move(feats), C, bit_depth);
}

ConvKernel random_kernel(std::mt19937_64& rng, int K, int ci, int co, bool bias) {
    ConvKernel k = ConvKernel::make(K, ci, co, bias);
    std::uniform_real_distribution<float> fd(-1.0f, 1.0f);
    for (float& w : k.weights) w = fd(rng);
    for (float& b : k.bias) b = fd(rng);
    return k;
}

// Dense zero-padded oracle of the generalized sparse convolution.
std::vector<double> conv_oracle(const DenseGrid& d, const ConvKernel& k,
                                const std::vector<Coord3>& out) {
    const int half = k.kernel_size / 2;
    std::vector<double> res(out.size() * static_cast<std::size_t>(k.out_channels), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i)
        for (int co = 0; co < k.out_channels; ++co) {
            double acc = k.bias.empty() ? 0.0 : k.bias[static_cast<std::size_t>(co)];
            std::size_t off = 0;
            for (int dx = -half; dx <= half; ++dx)
                for (int dy = -half; dy <= half; ++dy)
                    for (int dz = -half; dz <= half; ++dz, ++off)
                        for (int ci = 0; ci < k.in_channels; ++ci)
                            acc += k.weights[k.weight_index(off, ci, co)] *
                                   d.at(static_cast<int>(out[i].x) + dx,
                                        static_cast<int>(out[i].y) + dy,
                                        static_cast<int>(out[i].z) + dz, ci);
            res[i * k.out_channels + co] = acc;
        }
    return res;
}

}  // namespace

TEST_CASE("sparse_conv matches the dense zero-padded oracle") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        const int G = 3 + static_cast<int>(rng() % 3);
        const int C = 1 + static_cast<int>(rng() % 3);
        const int co = 1 + static_cast<int>(rng() % 3);
        const int K = std::array<int, 3>{1, 3, 5}[trial % 3];
        const SparseTensor3 in = random_tensor(rng, G, C, 3);
        ConvKernel k = random_kernel(rng, K, C, co, trial % 2 == 0);
        const Traced out = sparse_conv(nullptr, constant(in), k, in.coords(), 3);
        const auto oracle = conv_oracle(to_dense(in, G), k, in.coords());
        REQUIRE(out.value.feats().size() == oracle.size());
        for (std::size_t i = 0; i < oracle.size(); ++i)
            CHECK(std::fabs(out.value.feats()[i] - oracle[i]) < 1e-4);
    }
}

TEST_CASE("sparse_conv on arbitrary output coordinates, including empty rows") {
    std::mt19937_64 rng(22);
    const SparseTensor3 in = random_tensor(rng, 4, 2, 3);
    ConvKernel k = random_kernel(rng, 3, 2, 2, true);
    // Evaluate everywhere on the grid, occupied or not.
    std::vector<Coord3> all;
    for (std::uint32_t x = 0; x < 4; ++x)
        for (std::uint32_t y = 0; y < 4; ++y)
            for (std::uint32_t z = 0; z < 4; ++z) all.push_back({x, y, z});
    const SparseTensor3 sorted = make_occupancy(std::move(all), 3);
    const Traced out = sparse_conv(nullptr, constant(in), k, sorted.coords(), 3);
    const auto oracle = conv_oracle(to_dense(in, 4), k, sorted.coords());
    for (std::size_t i = 0; i < oracle.size(); ++i)
        CHECK(std::fabs(out.value.feats()[i] - oracle[i]) < 1e-4);
    ConvKernel even = ConvKernel::make(2, 2, 2);
    CHECK_THROWS_AS(sparse_conv(nullptr, constant(in), even, in.coords(), 3),
                    ShapeError);
}

TEST_CASE("down_conv_s2 matches a dense stride-2 oracle") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        const int C = 1 + static_cast<int>(rng() % 3);
        const SparseTensor3 in = random_tensor(rng, 4, C, 3);
        ConvKernel k = random_kernel(rng, 2, C, 2, trial % 2 == 0);
        const Traced out = down_conv_s2(nullptr, constant(in), k);
        const DenseGrid d = to_dense(in, 4);
        CHECK(out.value.bit_depth() == 2);
        const auto& oc = out.value.coords();
        CHECK(oc == downsample_coords(in.coords()));
        for (std::size_t i = 0; i < oc.size(); ++i)
            for (int co = 0; co < 2; ++co) {
                double acc = k.bias.empty() ? 0.0 : k.bias[static_cast<std::size_t>(co)];
                std::size_t off = 0;
                for (int dx = 0; dx <= 1; ++dx)
                    for (int dy = 0; dy <= 1; ++dy)
                        for (int dz = 0; dz <= 1; ++dz, ++off)
                            for (int ci = 0; ci < C; ++ci)
                                acc += k.weights[k.weight_index(off, ci, co)] *
                                       d.at(2 * static_cast<int>(oc[i].x) + dx,
                                            2 * static_cast<int>(oc[i].y) + dy,
                                            2 * static_cast<int>(oc[i].z) + dz, ci);
                CHECK(std::fabs(out.value.row(i)[co] - acc) < 1e-4);
            }
    }
}

TEST_CASE("up_conv_s2 matches the transposed oracle") {
    std::mt19937_64 rng(24);
    for (int trial = 0; trial < 20; ++trial) {
        const int C = 1 + static_cast<int>(rng() % 3);
        const SparseTensor3 in = random_tensor(rng, 3, C, 2);
        ConvKernel k = random_kernel(rng, 2, C, 3, trial % 2 == 0);
        const Traced out = up_conv_s2(nullptr, constant(in), k);
        CHECK(out.value.bit_depth() == 3);
        CHECK(out.value.coords() == child_candidates(in.coords()));
        for (std::size_t j = 0; j < in.size(); ++j)
            for (int d = 0; d < 8; ++d)
                for (int co = 0; co < 3; ++co) {
                    double acc =
                        k.bias.empty() ? 0.0 : k.bias[static_cast<std::size_t>(co)];
                    for (int ci = 0; ci < C; ++ci)
                        acc += k.weights[k.weight_index(static_cast<std::size_t>(d), ci,
                                                        co)] *
                               in.row(j)[ci];
                    CHECK(std::fabs(out.value.row(8 * j + d)[co] - acc) < 1e-4);
                }
    }
}

TEST_CASE("bias-free convolution is linear and translation equivariant") {
    std::mt19937_64 rng(25);
    const int C = 2;
    ConvKernel k = random_kernel(rng, 3, C, C, false);
    const SparseTensor3 a = random_tensor(rng, 4, C, 3, 1.0);  // full grid
    SparseTensor3 b = a;
    for (float& f : b.feats()) f = f * 0.5f + 0.25f;

    SparseTensor3 sum = a;
    for (std::size_t i = 0; i < sum.feats().size(); ++i)
        sum.feats()[i] += b.feats()[i];
    const auto ca = sparse_conv(nullptr, constant(a), k, a.coords(), 3).value;
    const auto cb = sparse_conv(nullptr, constant(b), k, a.coords(), 3).value;
    const auto cs = sparse_conv(nullptr, constant(sum), k, a.coords(), 3).value;
    for (std::size_t i = 0; i < cs.feats().size(); ++i)
        CHECK(std::fabs(cs.feats()[i] - (ca.feats()[i] + cb.feats()[i])) < 1e-4);

    // Shift a 2^3 block by +1 along every axis inside a 5-bit grid.
    const SparseTensor3 small = random_tensor(rng, 2, C, 5, 1.0);
    std::vector<Coord3> shifted = small.coords();
    for (Coord3& c : shifted) c = {c.x + 1, c.y + 1, c.z + 1};
    const SparseTensor3 moved =
        SparseTensor3::from_sorted(shifted, small.feats(), C, 5);
    const auto c0 = sparse_conv(nullptr, constant(small), k, small.coords(), 5).value;
    const auto c1 = sparse_conv(nullptr, constant(moved), k, moved.coords(), 5).value;
    for (std::size_t i = 0; i < c0.feats().size(); ++i)
        CHECK(c0.feats()[i] == doctest::Approx(c1.feats()[i]).epsilon(1e-5));
}

TEST_CASE("pointwise and structural ops") {
    std::mt19937_64 rng(26);
    const SparseTensor3 in = random_tensor(rng, 3, 2, 2);
    const Traced t = constant(in);

    const Traced r = relu(nullptr, t);
    const Traced s = sigmoid(nullptr, t);
    for (std::size_t i = 0; i < in.feats().size(); ++i) {
        CHECK(r.value.feats()[i] == std::max(0.0f, in.feats()[i]));
        CHECK(s.value.feats()[i] ==
              doctest::Approx(1.0f / (1.0f + std::exp(-in.feats()[i]))));
    }

    const Traced cat = concat_channels(nullptr, t, t);
    CHECK(cat.value.channels() == 4);
    for (std::size_t i = 0; i < in.size(); ++i)
        for (int c = 0; c < 2; ++c) {
            CHECK(cat.value.row(i)[c] == in.row(i)[c]);
            CHECK(cat.value.row(i)[c + 2] == in.row(i)[c]);
        }

    const Traced tw = add_features(nullptr, t, t);
    const Traced z = sub_features(nullptr, tw, t);
    for (std::size_t i = 0; i < in.feats().size(); ++i) {
        CHECK(tw.value.feats()[i] == 2.0f * in.feats()[i]);
        CHECK(z.value.feats()[i] == in.feats()[i]);
    }

    const Traced g = gather_rows(nullptr, t, {0});
    CHECK(g.value.size() == 1);
    CHECK(g.value.coords()[0] == in.coords()[0]);

    CHECK_THROWS_AS(add_features(nullptr, t, cat), ShapeError);
    CHECK_THROWS_AS(sub_features(nullptr, t, cat), ShapeError);
}

TEST_CASE("bce_loss_bits equals the Shannon sum with clamping") {
    const std::vector<Coord3> coords{{0, 0, 0}, {0, 0, 1}, {0, 1, 0}};
    const std::vector<float> probs{0.25f, 0.75f, 1.0f};  // last clamps to 1-2^-15
    const Traced p =
        constant(SparseTensor3::from_sorted(coords, probs, 1, 2));
    const std::vector<std::uint8_t> bits{1, 0, 0};
    const TracedScalar loss = bce_loss_bits(nullptr, p, bits);
    const double expect = -std::log2(0.25) - std::log2(0.25) -
                          std::log2(1.0 - (1.0 - 1.0 / 32768.0));
    CHECK(loss.value == doctest::Approx(expect).epsilon(1e-9));
}
