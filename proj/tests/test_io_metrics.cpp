#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "dpcc/io_metrics.hpp"

using namespace dpcc;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const char* name) : path(std::string("/tmp/dpcc_test_") + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

// Lagrange interpolation through exactly 4 points, evaluated with Horner-free
// direct summation: an oracle independent of the least-squares fit.
double lagrange_eval(const std::array<double, 4>& x, const std::array<double, 4>& y,
                     double at) {
    double acc = 0.0;
    for (int i = 0; i < 4; ++i) {
        double term = y[i];
        for (int j = 0; j < 4; ++j)
            if (j != i) term *= (at - x[j]) / (x[i] - x[j]);
        acc += term;
    }
    return acc;
}

}  // namespace

TEST_CASE("ply ascii roundtrip with extra properties skipped") {
    TempFile f("cloud.ply");
    {
        std::ofstream out(f.path);
        out << "ply\nformat ascii 1.0\ncomment test cloud\n"
            << "element vertex 3\n"
            << "property float x\nproperty float y\nproperty float z\n"
            << "property uchar red\n"
            << "end_header\n"
            << "1.5 2.5 3.5 255\n"
            << "0 0 0 0\n"
            << "-1 4 2.25 7\n";
    }
    const RawCloud c = read_ply(f.path);
    REQUIRE(c.points.size() == 3);
    CHECK(c.points[0] == std::array<float, 3>{1.5f, 2.5f, 3.5f});
    CHECK(c.points[2] == std::array<float, 3>{-1.f, 4.f, 2.25f});

    TempFile g("cloud2.ply");
    write_ply(c, g.path, false);
    const RawCloud back = read_ply(g.path);
    CHECK(back.points == c.points);
}

TEST_CASE("ply binary little-endian roundtrip") {
    RawCloud c;
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<float> d(-100.f, 100.f);
    for (int i = 0; i < 500; ++i) c.points.push_back({d(rng), d(rng), d(rng)});
    TempFile f("bin.ply");
    write_ply(c, f.path, true);
    const RawCloud back = read_ply(f.path);
    CHECK(back.points == c.points);  // bit-exact float roundtrip
}

TEST_CASE("ply reader error cases") {
    TempFile f("bad.ply");
    auto write = [&](const std::string& s) {
        std::ofstream out(f.path, std::ios::trunc);
        out << s;
    };
    write("solid nope\n");
    CHECK_THROWS_AS(read_ply(f.path), FormatError);
    write("ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n");
    CHECK_THROWS_AS(read_ply(f.path), FormatError);
    write("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n"
          "property float y\nend_header\n1 2\n");
    CHECK_THROWS_AS(read_ply(f.path), FormatError);  // no z
    write("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
          "property float y\nproperty float z\nend_header\n1 2 3\n");
    CHECK_THROWS_AS(read_ply(f.path), FormatError);  // truncated payload
    CHECK_THROWS_AS(read_ply("/nonexistent.ply"), IoError);
}

TEST_CASE("ply double properties and preceding scalar elements") {
    TempFile f("dbl.ply");
    {
        std::ofstream out(f.path);
        out << "ply\nformat ascii 1.0\n"
            << "element extra 2\nproperty float pad\n"
            << "element vertex 1\n"
            << "property double x\nproperty double y\nproperty double z\n"
            << "end_header\n9\n8\n0.5 1.5 2.5\n";
    }
    const RawCloud c = read_ply(f.path);
    REQUIRE(c.points.size() == 1);
    CHECK(c.points[0] == std::array<float, 3>{0.5f, 1.5f, 2.5f});
}

TEST_CASE("voxelize maps the bounding box onto the grid and dedups") {
    RawCloud c;
    c.points = {{0.f, 0.f, 0.f}, {10.f, 10.f, 10.f}, {10.f, 10.f, 10.f},
                {5.f, 0.f, 10.f}};
    const VoxelGrid g = voxelize(c, 4);
    CHECK(g.geometry.bit_depth() == 4);
    CHECK(g.geometry.size() == 3);  // duplicate voxel merged
    CHECK(g.shift == std::array<float, 3>{0.f, 0.f, 0.f});
    CHECK(g.scale == doctest::Approx(15.0f / 10.0f));
    const MortonMap map(g.geometry.coords());
    CHECK(map.find(morton_encode({0, 0, 0})) >= 0);
    CHECK(map.find(morton_encode({15, 15, 15})) >= 0);
    CHECK(map.find(morton_encode({8, 0, 15})) >= 0);  // round(5*1.5)=8

    const RawCloud back = devoxelize(g.geometry, g.shift, g.scale);
    CHECK(back.points.size() == 3);
    CHECK_THROWS_AS(voxelize(RawCloud{}, 4), ShapeError);
}

TEST_CASE("d1_psnr closed-form single-point example") {
    // Two single-voxel clouds one unit apart at N=10: MSE 1, peak 3*1023^2.
    const SparseTensor3 a = make_occupancy({{100, 100, 100}}, 10);
    const SparseTensor3 b = make_occupancy({{100, 100, 101}}, 10);
    const double expect = 10.0 * std::log10(3.0 * 1023.0 * 1023.0);
    CHECK(std::fabs(d1_psnr(a, b) - expect) < 1e-6);
    CHECK(expect == doctest::Approx(64.9685).epsilon(1e-4));
    CHECK(d1_psnr(a, a) == 100.0);  // capped at identity
}

TEST_CASE("d1_psnr uses the symmetric max of directional MSEs") {
    // a has an outlier far from b; b is fully contained near a's cluster.
    const SparseTensor3 a =
        make_occupancy({{0, 0, 0}, {0, 0, 40}}, 6);
    const SparseTensor3 b = make_occupancy({{0, 0, 0}}, 6);
    // a->b MSE = (0 + 1600)/2 = 800; b->a MSE = 0.
    const double expect = 10.0 * std::log10(3.0 * 63.0 * 63.0 / 800.0);
    CHECK(d1_psnr(a, b) == doctest::Approx(expect).epsilon(1e-9));
    CHECK(d1_psnr(a, b) == doctest::Approx(d1_psnr(b, a)).epsilon(1e-12));
}

TEST_CASE("d1_psnr exact nearest neighbor on random clusters") {
    std::mt19937_64 rng(32);
    std::uniform_int_distribution<std::uint32_t> d(0, 31);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<Coord3> ca, cb;
        std::set<MortonKey> ka, kb;
        for (int i = 0; i < 60; ++i) {
            Coord3 p{d(rng), d(rng), d(rng)};
            if (ka.insert(morton_encode(p)).second) ca.push_back(p);
            Coord3 q{d(rng), d(rng), d(rng)};
            if (kb.insert(morton_encode(q)).second) cb.push_back(q);
        }
        const SparseTensor3 a = SparseTensor3::canonicalize(
            ca, std::vector<float>(ca.size(), 1.f), 1, 5);
        const SparseTensor3 b = SparseTensor3::canonicalize(
            cb, std::vector<float>(cb.size(), 1.f), 1, 5);

        // Brute-force oracle.
        auto mse = [](const SparseTensor3& u, const SparseTensor3& v) {
            double s = 0;
            for (const Coord3& p : u.coords()) {
                double best = 1e30;
                for (const Coord3& q : v.coords()) {
                    const double dx = double(p.x) - q.x, dy = double(p.y) - q.y,
                                 dz = double(p.z) - q.z;
                    best = std::min(best, dx * dx + dy * dy + dz * dz);
                }
                s += best;
            }
            return s / double(u.size());
        };
        const double m = std::max(mse(a, b), mse(b, a));
        const double expect =
            m <= 0 ? 100.0 : std::min(100.0, 10 * std::log10(3.0 * 31 * 31 / m));
        CHECK(d1_psnr(a, b) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("bits_per_point") {
    CHECK(bits_per_point(100, 800) == doctest::Approx(1.0));
    CHECK_THROWS_AS(bits_per_point(1, 0), ShapeError);
}

TEST_CASE("bd_rate matches the interpolation + dense integration oracle") {
    std::mt19937_64 rng(33);
    std::uniform_real_distribution<double> jitter(-0.05, 0.05);
    for (int trial = 0; trial < 20; ++trial) {
        // Monotone 4-point curves: cubic least squares interpolates exactly,
        // so Lagrange interpolation + Simpson integration is an oracle.
        std::array<double, 4> psnr_a, psnr_t, lr_a, lr_t;
        for (int i = 0; i < 4; ++i) {
            psnr_a[i] = 55.0 + 5.0 * i + jitter(rng);
            psnr_t[i] = 54.0 + 5.2 * i + jitter(rng);
            lr_a[i] = std::log10(0.1 * std::pow(2.2, i) * (1.0 + jitter(rng)));
            lr_t[i] = std::log10(0.08 * std::pow(2.3, i) * (1.0 + jitter(rng)));
        }
        std::vector<RdPoint> a, t;
        for (int i = 0; i < 4; ++i) {
            a.push_back({std::pow(10.0, lr_a[i]), psnr_a[i]});
            t.push_back({std::pow(10.0, lr_t[i]), psnr_t[i]});
        }
        const double lo = std::max(psnr_a[0], psnr_t[0]);
        const double hi = std::min(psnr_a[3], psnr_t[3]);
        const int steps = 20000;
        double acc = 0.0;
        for (int i = 0; i <= steps; ++i) {
            const double x = lo + (hi - lo) * i / steps;
            const double w = (i == 0 || i == steps) ? 1.0 : (i % 2 ? 4.0 : 2.0);
            acc += w * (lagrange_eval(psnr_t, lr_t, x) - lagrange_eval(psnr_a, lr_a, x));
        }
        acc *= (hi - lo) / (3.0 * steps) / (hi - lo);
        const double oracle = (std::pow(10.0, acc) - 1.0) * 100.0;
        const double got = bd_rate_percent(a, t);
        CHECK(std::fabs(got - oracle) <= std::max(0.001 * std::fabs(oracle), 1e-6) + 1e-9);
    }
}

TEST_CASE("bd_rate fixed points: self is 0%, rate halving is -50%") {
    std::vector<RdPoint> a;
    for (int i = 0; i < 4; ++i) a.push_back({0.2 * (i + 1), 55.0 + 4.0 * i});
    CHECK(bd_rate_percent(a, a) == doctest::Approx(0.0).epsilon(1e-9));
    std::vector<RdPoint> half = a;
    for (RdPoint& p : half) p.bpp *= 0.5;
    CHECK(bd_rate_percent(a, half) == doctest::Approx(-50.0).epsilon(1e-9));
    CHECK(bd_rate_percent(half, a) == doctest::Approx(100.0).epsilon(1e-9));
    std::vector<RdPoint> three(a.begin(), a.begin() + 3);
    CHECK_THROWS_AS(bd_rate_percent(three, a), ShapeError);
    std::vector<RdPoint> disjoint = a;
    for (RdPoint& p : disjoint) p.psnr += 100.0;
    CHECK_THROWS_AS(bd_rate_percent(a, disjoint), ShapeError);
}

TEST_CASE("csv report schema") {
    TempFile f("report.csv");
    write_csv_report({{0, 'I', 120, 1.25, 64.5}, {1, 'P', 80, 0.75, 63.0}}, f.path);
    std::ifstream in(f.path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "frame,type,bytes,bpp,d1_psnr");
    std::getline(in, line);
    CHECK(line.substr(0, 10) == "0,I,120,1.");
    std::getline(in, line);
    CHECK(line.substr(0, 8) == "1,P,80,0");
}
