#include "dpcc/io_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace dpcc {

namespace {

struct PlyProperty {
    std::string name;
    std::string type;
    bool is_list = false;
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> props;
};

std::size_t scalar_size(const std::string& type) {
    if (type == "char" || type == "uchar" || type == "int8" || type == "uint8") return 1;
    if (type == "short" || type == "ushort" || type == "int16" || type == "uint16")
        return 2;
    if (type == "int" || type == "uint" || type == "int32" || type == "uint32" ||
        type == "float" || type == "float32")
        return 4;
    if (type == "double" || type == "float64") return 8;
    throw FormatError("ply: unknown property type '" + type + "'");
}

float read_binary_scalar(std::istream& in, const std::string& type) {
    std::uint8_t buf[8];
    const std::size_t n = scalar_size(type);
    in.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(n));
    if (!in) throw FormatError("ply: truncated binary payload");
    if (type == "float" || type == "float32") {
        float v;
        std::memcpy(&v, buf, 4);
        return v;
    }
    if (type == "double" || type == "float64") {
        double v;
        std::memcpy(&v, buf, 8);
        return static_cast<float>(v);
    }
    // Integer types: little-endian assemble, sign handled via width.
    std::uint64_t u = 0;
    for (std::size_t i = 0; i < n; ++i) u |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    if (type[0] == 'u') return static_cast<float>(u);
    const std::uint64_t sign_bit = 1ull << (8 * n - 1);
    if (u & sign_bit) {
        const std::int64_t v =
            static_cast<std::int64_t>(u) - static_cast<std::int64_t>(sign_bit << 1);
        return static_cast<float>(v);
    }
    return static_cast<float>(u);
}

}  // namespace

RawCloud read_ply(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open ply file: " + path);

    std::string line;
    if (!std::getline(f, line)) throw FormatError("ply: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "ply") throw FormatError("ply: missing magic line");

    bool binary = false;
    bool format_seen = false;
    std::vector<PlyElement> elements;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "comment" || tok == "obj_info" || tok.empty()) continue;
        if (tok == "format") {
            std::string fmt, ver;
            ls >> fmt >> ver;
            if (fmt == "ascii") binary = false;
            else if (fmt == "binary_little_endian") binary = true;
            else throw FormatError("ply: unsupported format '" + fmt + "'");
            format_seen = true;
        } else if (tok == "element") {
            PlyElement e;
            ls >> e.name >> e.count;
            if (!ls) throw FormatError("ply: malformed element line");
            elements.push_back(std::move(e));
        } else if (tok == "property") {
            if (elements.empty()) throw FormatError("ply: property before element");
            PlyProperty p;
            std::string type;
            ls >> type;
            if (type == "list") {
                p.is_list = true;
                std::string count_type, value_type;
                ls >> count_type >> value_type >> p.name;
                scalar_size(count_type);
                scalar_size(value_type);
                p.type = count_type + " " + value_type;
            } else {
                p.type = type;
                scalar_size(type);
                ls >> p.name;
            }
            if (p.name.empty()) throw FormatError("ply: malformed property line");
            elements.back().props.push_back(std::move(p));
        } else if (tok == "end_header") {
            break;
        } else {
            throw FormatError("ply: unknown header keyword '" + tok + "'");
        }
        if (f.eof()) break;
    }
    if (!format_seen) throw FormatError("ply: missing format line");

    const auto vertex_it =
        std::find_if(elements.begin(), elements.end(),
                     [](const PlyElement& e) { return e.name == "vertex"; });
    if (vertex_it == elements.end()) throw FormatError("ply: no vertex element");

    int ix = -1, iy = -1, iz = -1;
    for (std::size_t i = 0; i < vertex_it->props.size(); ++i) {
        const PlyProperty& p = vertex_it->props[i];
        if (p.is_list) throw FormatError("ply: list property in vertex element");
        if (p.name == "x") ix = static_cast<int>(i);
        if (p.name == "y") iy = static_cast<int>(i);
        if (p.name == "z") iz = static_cast<int>(i);
    }
    if (ix < 0 || iy < 0 || iz < 0)
        throw FormatError("ply: vertex element lacks x/y/z properties");

    RawCloud cloud;
    for (const PlyElement& e : elements) {
        const bool is_vertex = &e == &*vertex_it;
        if (!is_vertex && &e > &*vertex_it) break;  // trailing elements ignored
        if (!is_vertex) {
            // Elements before the vertex data must be skipped exactly.
            for (const PlyProperty& p : e.props)
                if (p.is_list)
                    throw FormatError("ply: list property before vertex element");
            for (std::size_t r = 0; r < e.count; ++r) {
                if (binary) {
                    for (const PlyProperty& p : e.props) read_binary_scalar(f, p.type);
                } else {
                    if (!std::getline(f, line))
                        throw FormatError("ply: truncated ascii payload");
                }
            }
            continue;
        }
        cloud.points.reserve(e.count);
        for (std::size_t r = 0; r < e.count; ++r) {
            float row[3] = {0, 0, 0};
            if (binary) {
                for (std::size_t i = 0; i < e.props.size(); ++i) {
                    const float v = read_binary_scalar(f, e.props[i].type);
                    if (static_cast<int>(i) == ix) row[0] = v;
                    if (static_cast<int>(i) == iy) row[1] = v;
                    if (static_cast<int>(i) == iz) row[2] = v;
                }
            } else {
                if (!std::getline(f, line))
                    throw FormatError("ply: truncated ascii payload");
                std::istringstream ls(line);
                for (std::size_t i = 0; i < e.props.size(); ++i) {
                    float v;
                    if (!(ls >> v)) throw FormatError("ply: malformed ascii vertex row");
                    if (static_cast<int>(i) == ix) row[0] = v;
                    if (static_cast<int>(i) == iy) row[1] = v;
                    if (static_cast<int>(i) == iz) row[2] = v;
                }
            }
            if (!std::isfinite(row[0]) || !std::isfinite(row[1]) ||
                !std::isfinite(row[2]))
                throw FormatError("ply: non-finite vertex coordinate");
            cloud.points.push_back({row[0], row[1], row[2]});
        }
    }
    return cloud;
}

void write_ply(const RawCloud& cloud, const std::string& path, bool binary) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open ply file for writing: " + path);
    f << "ply\n"
      << (binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n")
      << "element vertex " << cloud.points.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\nend_header\n";
    if (binary) {
        static_assert(sizeof(float) == 4);
        for (const auto& p : cloud.points)
            f.write(reinterpret_cast<const char*>(p.data()), 12);
    } else {
        for (const auto& p : cloud.points) {
            std::ostringstream row;
            row.precision(9);
            row << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
            f << row.str();
        }
    }
    if (!f) throw IoError("short write to ply file: " + path);
}

VoxelGrid voxelize(const RawCloud& cloud, int bit_depth) {
    if (cloud.points.empty()) throw ShapeError("voxelize: empty cloud");
    if (bit_depth < 1 || bit_depth > kMaxBitDepth)
        throw ShapeError("voxelize: bit depth out of range");
    std::array<float, 3> lo = cloud.points[0], hi = cloud.points[0];
    for (const auto& p : cloud.points)
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
        }
    const float extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    const float max_coord = static_cast<float>((1u << bit_depth) - 1);
    const float scale = extent > 0 ? max_coord / extent : 1.0f;

    std::vector<MortonKey> keys;
    keys.reserve(cloud.points.size());
    for (const auto& p : cloud.points) {
        Coord3 c;
        const auto q = [&](int a) {
            const long v = std::lround((p[a] - lo[a]) * scale);
            return static_cast<std::uint32_t>(
                std::clamp<long>(v, 0, static_cast<long>(max_coord)));
        };
        c = {q(0), q(1), q(2)};
        keys.push_back(morton_encode(c));
    }
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    std::vector<Coord3> coords(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) coords[i] = morton_decode(keys[i]);

    VoxelGrid grid;
    grid.geometry = make_occupancy(std::move(coords), bit_depth);
    grid.shift = lo;
    grid.scale = scale;
    return grid;
}

RawCloud devoxelize(const SparseTensor3& geometry, const std::array<float, 3>& shift,
                    float scale) {
    if (!(scale > 0)) throw ShapeError("devoxelize: scale must be positive");
    RawCloud cloud;
    cloud.points.reserve(geometry.size());
    for (const Coord3& c : geometry.coords())
        cloud.points.push_back({static_cast<float>(c.x) / scale + shift[0],
                                static_cast<float>(c.y) / scale + shift[1],
                                static_cast<float>(c.z) / scale + shift[2]});
    return cloud;
}

namespace {

// Mean squared exact nearest-neighbor distance from each point of `from` to
// the set `to`, searching grid-bucket shells of growing Chebyshev radius.
double directional_mse(const SparseTensor3& from, const SparseTensor3& to) {
    const MortonMap map(to.coords());
    const std::int64_t limit = 1ll << to.bit_depth();
    double sum = 0.0;
    for (const Coord3& p : from.coords()) {
        std::int64_t best = -1;
        const std::int64_t px = p.x, py = p.y, pz = p.z;
        for (std::int64_t rad = 0; rad < limit; ++rad) {
            if (best >= 0 && rad * rad > best) break;
            // Cells at Chebyshev distance exactly rad from p.
            for (std::int64_t dx = -rad; dx <= rad; ++dx) {
                const std::int64_t x = px + dx;
                if (x < 0 || x >= limit) continue;
                const bool x_face = std::llabs(dx) == rad;
                for (std::int64_t dy = -rad; dy <= rad; ++dy) {
                    const std::int64_t y = py + dy;
                    if (y < 0 || y >= limit) continue;
                    const bool xy_face = x_face || std::llabs(dy) == rad;
                    const std::int64_t dz_step = xy_face ? 1 : std::max<std::int64_t>(2 * rad, 1);
                    for (std::int64_t dz = -rad; dz <= rad; dz += dz_step) {
                        const std::int64_t z = pz + dz;
                        if (z < 0 || z >= limit) continue;
                        const Coord3 c{static_cast<std::uint32_t>(x),
                                       static_cast<std::uint32_t>(y),
                                       static_cast<std::uint32_t>(z)};
                        if (map.find(morton_encode(c)) < 0) continue;
                        const std::int64_t d2 = dx * dx + dy * dy + dz * dz;
                        if (best < 0 || d2 < best) best = d2;
                    }
                }
            }
        }
        if (best < 0) throw StateError("d1_psnr: reference set is empty");
        sum += static_cast<double>(best);
    }
    return sum / static_cast<double>(from.size());
}

}  // namespace

double d1_psnr(const SparseTensor3& a, const SparseTensor3& b) {
    if (a.bit_depth() != b.bit_depth())
        throw ShapeError("d1_psnr: bit depth mismatch");
    if (a.empty() || b.empty()) throw ShapeError("d1_psnr: empty cloud");
    const double mse = std::max(directional_mse(a, b), directional_mse(b, a));
    const double side = static_cast<double>((1u << a.bit_depth()) - 1);
    const double peak = 3.0 * side * side;
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(peak / mse));
}

double bits_per_point(std::size_t payload_bytes, std::uint64_t point_count) {
    if (point_count == 0) throw ShapeError("bits_per_point: zero point count");
    return 8.0 * static_cast<double>(payload_bytes) / static_cast<double>(point_count);
}

namespace {

// Least-squares polynomial fit of y over x, degree min(3, n-1), via normal
// equations and Gaussian elimination with partial pivoting.
std::vector<double> polyfit(std::span<const double> x, std::span<const double> y) {
    const int deg = std::min<int>(3, static_cast<int>(x.size()) - 1);
    const int k = deg + 1;
    std::vector<double> a(static_cast<std::size_t>(k) * k, 0.0), rhs(k, 0.0);
    for (std::size_t s = 0; s < x.size(); ++s) {
        double pows[8];
        pows[0] = 1.0;
        for (int i = 1; i < 2 * k - 1; ++i) pows[i] = pows[i - 1] * x[s];
        for (int i = 0; i < k; ++i) {
            rhs[static_cast<std::size_t>(i)] += pows[i] * y[s];
            for (int j = 0; j < k; ++j)
                a[static_cast<std::size_t>(i) * k + j] += pows[i + j];
        }
    }
    for (int col = 0; col < k; ++col) {
        int piv = col;
        for (int r = col + 1; r < k; ++r)
            if (std::fabs(a[static_cast<std::size_t>(r) * k + col]) >
                std::fabs(a[static_cast<std::size_t>(piv) * k + col]))
                piv = r;
        if (std::fabs(a[static_cast<std::size_t>(piv) * k + col]) < 1e-12)
            throw ShapeError("bd_rate: degenerate rate-distortion curve");
        if (piv != col) {
            for (int j = 0; j < k; ++j)
                std::swap(a[static_cast<std::size_t>(piv) * k + j],
                          a[static_cast<std::size_t>(col) * k + j]);
            std::swap(rhs[static_cast<std::size_t>(piv)],
                      rhs[static_cast<std::size_t>(col)]);
        }
        for (int r = 0; r < k; ++r) {
            if (r == col) continue;
            const double f = a[static_cast<std::size_t>(r) * k + col] /
                             a[static_cast<std::size_t>(col) * k + col];
            for (int j = col; j < k; ++j)
                a[static_cast<std::size_t>(r) * k + j] -=
                    f * a[static_cast<std::size_t>(col) * k + j];
            rhs[static_cast<std::size_t>(r)] -= f * rhs[static_cast<std::size_t>(col)];
        }
    }
    std::vector<double> coef(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i)
        coef[static_cast<std::size_t>(i)] =
            rhs[static_cast<std::size_t>(i)] / a[static_cast<std::size_t>(i) * k + i];
    return coef;
}

double poly_integral(const std::vector<double>& coef, double lo, double hi) {
    double acc = 0.0;
    double plo = lo, phi = hi;
    for (std::size_t i = 0; i < coef.size(); ++i) {
        acc += coef[i] * (phi - plo) / static_cast<double>(i + 1);
        plo *= lo;
        phi *= hi;
    }
    return acc;
}

}  // namespace

double bd_rate_percent(std::span<const RdPoint> anchor, std::span<const RdPoint> test) {
    if (anchor.size() < 4 || test.size() < 4)
        throw ShapeError("bd_rate: needs at least 4 points per curve");
    auto split = [](std::span<const RdPoint> pts, std::vector<double>& x,
                    std::vector<double>& y) {
        for (const RdPoint& p : pts) {
            if (!(p.bpp > 0)) throw ShapeError("bd_rate: non-positive rate");
            x.push_back(p.psnr);
            y.push_back(std::log10(p.bpp));
        }
    };
    std::vector<double> xa, ya, xt, yt;
    split(anchor, xa, ya);
    split(test, xt, yt);
    const double lo = std::max(*std::min_element(xa.begin(), xa.end()),
                               *std::min_element(xt.begin(), xt.end()));
    const double hi = std::min(*std::max_element(xa.begin(), xa.end()),
                               *std::max_element(xt.begin(), xt.end()));
    if (!(hi > lo)) throw ShapeError("bd_rate: curves do not overlap in PSNR");
    const std::vector<double> ca = polyfit(xa, ya);
    const std::vector<double> ct = polyfit(xt, yt);
    const double avg_diff =
        (poly_integral(ct, lo, hi) - poly_integral(ca, lo, hi)) / (hi - lo);
    return (std::pow(10.0, avg_diff) - 1.0) * 100.0;
}

void write_csv_report(const std::vector<FrameStat>& stats, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open report file for writing: " + path);
    f << "frame,type,bytes,bpp,d1_psnr\n";
    std::ostringstream body;
    body.precision(6);
    body << std::fixed;
    for (const FrameStat& s : stats)
        body << s.frame << ',' << s.type << ',' << s.bytes << ',' << s.bpp << ','
             << s.d1 << '\n';
    f << body.str();
    if (!f) throw IoError("short write to report file: " + path);
}

}  // namespace dpcc
