#include <doctest.h>

#include <cmath>
#include <random>

#include "dpcc/entropy.hpp"
#include "dpcc/sparse_nn.hpp"

using namespace dpcc;

namespace {

// Relative error with a unit floor: float32 forwards make tiny gradients
// indistinguishable from finite-difference noise, so errors are measured
// against max(1, |grad|).
double rel_err(double a, double f) {
    return std::fabs(a - f) / std::max({1.0, std::fabs(a), std::fabs(f)});
}

constexpr double kEps = 1e-2;
constexpr double kTol = 1e-3;

// Central finite differences of `loss()` against every entry of `params`,
// compared to `analytic`.  Each entry is estimated at eps and eps/2: if the
// two estimates disagree the perturbation straddled a non-smooth point (a
// ReLU kink in a hidden layer) and the entry is skipped; otherwise Richardson
// extrapolation of the pair cancels the leading O(eps^2) truncation term.
template <typename LossFn>
void check_fd(LossFn&& loss, std::vector<float>& params,
              std::span<const float> analytic) {
    REQUIRE(params.size() == analytic.size());
    std::size_t checked = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto fd_at = [&](double eps) {
            const float keep = params[i];
            params[i] = keep + static_cast<float>(eps);
            const double fp = loss();
            params[i] = keep - static_cast<float>(eps);
            const double fm = loss();
            params[i] = keep;
            return (fp - fm) / (2.0 * eps);
        };
        const double fd1 = fd_at(kEps);
        const double fd2 = fd_at(kEps / 2.0);
        if (rel_err(fd1, fd2) > kTol) continue;  // kink crossed; FD invalid
        const double fd = (4.0 * fd2 - fd1) / 3.0;
        CHECK(rel_err(analytic[i], fd) < kTol);
        ++checked;
    }
    // Skips must stay the exception, not the rule.
    CHECK(checked * 2 >= params.size());
}

SparseTensor3 block_tensor(std::mt19937_64& rng, int G, int C, int bd,
                           float lo = -1.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> fd(lo, hi);
    std::vector<Coord3> coords;
    for (int x = 0; x < G; ++x)
        for (int y = 0; y < G; ++y)
            for (int z = 0; z < G; ++z)
                if ((rng() & 3u) != 0u)
                    coords.push_back({static_cast<std::uint32_t>(x),
                                      static_cast<std::uint32_t>(y),
                                      static_cast<std::uint32_t>(z)});
    if (coords.empty()) coords.push_back({0, 0, 0});
    std::vector<float> feats(coords.size() * static_cast<std::size_t>(C));
    for (float& f : feats) f = fd(rng);
    return SparseTensor3::canonicalize(std::move(coords), std::move(feats), C, bd);
}

ConvKernel seeded_kernel(std::mt19937_64& rng, int K, int ci, int co, bool bias = true) {
    ConvKernel k = ConvKernel::make(K, ci, co, bias);
    std::uniform_real_distribution<float> fd(-0.8f, 0.8f);
    for (float& w : k.weights) w = fd(rng);
    for (float& b : k.bias) b = fd(rng);
    return k;
}

}  // namespace

TEST_CASE("finite differences: sparse_conv weights, bias and input") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        std::mt19937_64 rng(100 + seed);
        const SparseTensor3 in = block_tensor(rng, 3, 2, 2);
        ConvKernel k = seeded_kernel(rng, 3, 2, 2);
        std::vector<float> feats = in.feats();
        const std::vector<Coord3> coords = in.coords();

        Tape tape;
        Traced leaf{SparseTensor3::from_sorted(coords, feats, 2, 2),
                    tape.alloc(feats.size())};
        TracedScalar loss =
            sum_all(&tape, sparse_conv(&tape, leaf, k, coords, 2));
        tape.backward(loss.grad_id);
        const std::vector<float> g_in = tape.grad(leaf.grad_id);
        const std::vector<float> g_w = k.weight_grad;
        const std::vector<float> g_b = k.bias_grad;

        auto eval = [&] {
            Traced x = constant(SparseTensor3::from_sorted(coords, feats, 2, 2));
            return sum_all(nullptr, sparse_conv(nullptr, x, k, coords, 2)).value;
        };
        check_fd(eval, feats, g_in);
        check_fd(eval, k.weights, g_w);
        check_fd(eval, k.bias, g_b);
    }
}

TEST_CASE("finite differences: down_conv_s2 and up_conv_s2") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        std::mt19937_64 rng(200 + seed);
        const SparseTensor3 in = block_tensor(rng, 4, 2, 2);
        ConvKernel kd = seeded_kernel(rng, 2, 2, 2);
        ConvKernel ku = seeded_kernel(rng, 2, 2, 2);
        std::vector<float> feats = in.feats();
        const std::vector<Coord3> coords = in.coords();

        Tape tape;
        Traced leaf{SparseTensor3::from_sorted(coords, feats, 2, 2),
                    tape.alloc(feats.size())};
        Traced mid = down_conv_s2(&tape, leaf, kd);
        TracedScalar loss = sum_all(&tape, up_conv_s2(&tape, mid, ku));
        tape.backward(loss.grad_id);
        const std::vector<float> g_in = tape.grad(leaf.grad_id);
        const std::vector<float> g_wd = kd.weight_grad;
        const std::vector<float> g_wu = ku.weight_grad;
        const std::vector<float> g_bu = ku.bias_grad;

        auto eval = [&] {
            Traced x = constant(SparseTensor3::from_sorted(coords, feats, 2, 2));
            return sum_all(nullptr,
                           up_conv_s2(nullptr, down_conv_s2(nullptr, x, kd), ku))
                .value;
        };
        check_fd(eval, feats, g_in);
        check_fd(eval, kd.weights, g_wd);
        check_fd(eval, ku.weights, g_wu);
        check_fd(eval, ku.bias, g_bu);
    }
}

TEST_CASE("finite differences: relu, sigmoid, concat, add, sub, gather") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        std::mt19937_64 rng(300 + seed);
        SparseTensor3 in = block_tensor(rng, 3, 2, 2);
        // Keep values away from the ReLU kink so central differences are valid.
        for (float& f : in.feats())
            if (std::fabs(f) < 0.1f) f = f < 0 ? f - 0.1f : f + 0.1f;
        std::vector<float> feats = in.feats();
        const std::vector<Coord3> coords = in.coords();
        std::vector<std::uint32_t> rows;
        for (std::uint32_t i = 0; i < in.size(); i += 2) rows.push_back(i);

        Tape tape;
        Traced leaf{SparseTensor3::from_sorted(coords, feats, 2, 2),
                    tape.alloc(feats.size())};
        Traced a = relu(&tape, leaf);
        Traced b = sigmoid(&tape, leaf);
        Traced c = concat_channels(&tape, a, b);
        Traced d = add_features(&tape, c, c);
        Traced e = sub_features(&tape, d, c);
        TracedScalar loss = sum_all(&tape, gather_rows(&tape, e, rows));
        tape.backward(loss.grad_id);
        const std::vector<float> g_in = tape.grad(leaf.grad_id);

        auto eval = [&] {
            Traced x = constant(SparseTensor3::from_sorted(coords, feats, 2, 2));
            Traced ra = relu(nullptr, x);
            Traced rb = sigmoid(nullptr, x);
            Traced rc = concat_channels(nullptr, ra, rb);
            Traced rd = add_features(nullptr, rc, rc);
            Traced re = sub_features(nullptr, rd, rc);
            return sum_all(nullptr, gather_rows(nullptr, re, rows)).value;
        };
        check_fd(eval, feats, g_in);
    }
}

TEST_CASE("finite differences: inception-residual block") {
    for (std::uint64_t seed = 0; seed < 2; ++seed) {
        std::mt19937_64 rng(400 + seed);
        const int w = 4;
        const SparseTensor3 in = block_tensor(rng, 3, w, 2);
        ConvKernel b0c0 = seeded_kernel(rng, 1, w, w / 4);
        ConvKernel b1c0 = seeded_kernel(rng, 1, w, w / 4);
        ConvKernel b1c1 = seeded_kernel(rng, 3, w / 4, w / 4);
        ConvKernel b2c0 = seeded_kernel(rng, 1, w, w / 4);
        ConvKernel b2c1 = seeded_kernel(rng, 3, w / 4, w / 4);
        ConvKernel b2c2 = seeded_kernel(rng, 3, w / 4, w / 2);
        const IrnWeights irn{&b0c0, &b1c0, &b1c1, &b2c0, &b2c1, &b2c2};
        std::vector<float> feats = in.feats();
        const std::vector<Coord3> coords = in.coords();

        Tape tape;
        Traced leaf{SparseTensor3::from_sorted(coords, feats, w, 2),
                    tape.alloc(feats.size())};
        TracedScalar loss = sum_all(&tape, irn_forward(&tape, leaf, irn));
        tape.backward(loss.grad_id);
        const std::vector<float> g_in = tape.grad(leaf.grad_id);
        const std::vector<float> g_b2c2 = b2c2.weight_grad;
        const std::vector<float> g_b0c0 = b0c0.weight_grad;

        auto eval = [&] {
            Traced x = constant(SparseTensor3::from_sorted(coords, feats, w, 2));
            return sum_all(nullptr, irn_forward(nullptr, x, irn)).value;
        };
        check_fd(eval, feats, g_in);
        check_fd(eval, b2c2.weights, g_b2c2);
        check_fd(eval, b0c0.weights, g_b0c0);
    }
}

TEST_CASE("finite differences: binary cross-entropy loss") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        std::mt19937_64 rng(500 + seed);
        // Probabilities well inside the clamp region.
        SparseTensor3 in = block_tensor(rng, 3, 1, 2, 0.15f, 0.85f);
        std::vector<float> feats = in.feats();
        const std::vector<Coord3> coords = in.coords();
        std::vector<std::uint8_t> bits(in.size());
        for (auto& b : bits) b = rng() & 1u;

        Tape tape;
        Traced leaf{SparseTensor3::from_sorted(coords, feats, 1, 2),
                    tape.alloc(feats.size())};
        TracedScalar loss = bce_loss_bits(&tape, leaf, bits);
        tape.backward(loss.grad_id);
        const std::vector<float> g_in = tape.grad(leaf.grad_id);

        auto eval = [&] {
            Traced x = constant(SparseTensor3::from_sorted(coords, feats, 1, 2));
            return bce_loss_bits(nullptr, x, bits).value;
        };
        check_fd(eval, feats, g_in);
    }
}

TEST_CASE("finite differences: factorized rate loss in logits and inputs") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        std::mt19937_64 rng(600 + seed);
        const int C = 2, L = 4;
        FactorizedModel fm(C, L);
        std::uniform_real_distribution<float> ld(-0.5f, 0.5f);
        for (float& l : fm.logits()) l = ld(rng);

        // Inputs inside the support with fractional parts away from the
        // piecewise-linear kinks at integers.
        const std::vector<Coord3> coords{{0, 0, 0}, {0, 0, 1}, {0, 1, 0}};
        std::vector<float> feats(coords.size() * C);
        std::uniform_int_distribution<int> sym(-2, 2);
        std::uniform_real_distribution<float> frac(0.2f, 0.45f);
        for (float& f : feats) f = static_cast<float>(sym(rng)) + frac(rng);

        Tape tape;
        Traced leaf{SparseTensor3::from_sorted(coords, feats, C, 2),
                    tape.alloc(feats.size())};
        TracedScalar loss = factorized_rate_bits(&tape, leaf, fm);
        tape.backward(loss.grad_id);
        const std::vector<float> g_in = tape.grad(leaf.grad_id);
        const std::vector<float> g_logits = fm.logit_grad();

        auto eval = [&] {
            Traced x = constant(SparseTensor3::from_sorted(coords, feats, C, 2));
            return factorized_rate_bits(nullptr, x, fm).value;
        };
        check_fd(eval, feats, g_in);
        check_fd(eval, fm.logits(), g_logits);
        std::fill(fm.logit_grad().begin(), fm.logit_grad().end(), 0.0f);
    }
}

TEST_CASE("finite differences: scalar combinators") {
    std::mt19937_64 rng(700);
    const SparseTensor3 in = block_tensor(rng, 2, 1, 1, 0.2f, 0.8f);
    std::vector<float> feats = in.feats();
    const std::vector<Coord3> coords = in.coords();
    std::vector<std::uint8_t> bits(in.size(), 1);

    Tape tape;
    Traced leaf{SparseTensor3::from_sorted(coords, feats, 1, 1),
                tape.alloc(feats.size())};
    TracedScalar a = bce_loss_bits(&tape, leaf, bits);
    TracedScalar b = sum_all(&tape, leaf);
    TracedScalar loss = scalar_add(&tape, scalar_scale(&tape, a, 2.5), b);
    tape.backward(loss.grad_id);
    const std::vector<float> g_in = tape.grad(leaf.grad_id);

    auto eval = [&] {
        Traced x = constant(SparseTensor3::from_sorted(coords, feats, 1, 1));
        TracedScalar ra = bce_loss_bits(nullptr, x, bits);
        TracedScalar rb = sum_all(nullptr, x);
        return scalar_add(nullptr, scalar_scale(nullptr, ra, 2.5), rb).value;
    };
    check_fd(eval, feats, g_in);
}
