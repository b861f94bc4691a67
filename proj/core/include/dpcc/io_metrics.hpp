#pragma once

#include <array>

#include "dpcc/sparse_tensor.hpp"

namespace dpcc {

struct RawCloud {
    std::vector<std::array<float, 3>> points;
};

// PLY geometry reader: ascii and binary_little_endian, float or double
// vertex x/y/z, other scalar properties skipped. List properties are only
// accepted in elements after the vertex data (faces etc., which are ignored).
RawCloud read_ply(const std::string& path);
void write_ply(const RawCloud& cloud, const std::string& path, bool binary);

// coord = round((p - shift) * scale), duplicates merged. The shift/scale pair
// inverts the mapping for metric computation in source units if needed.
struct VoxelGrid {
    SparseTensor3 geometry;
    std::array<float, 3> shift{0, 0, 0};
    float scale = 1.0f;
};
VoxelGrid voxelize(const RawCloud& cloud, int bit_depth);
RawCloud devoxelize(const SparseTensor3& geometry, const std::array<float, 3>& shift,
                    float scale);

// Point-to-point (D1) PSNR in voxel units: peak 3*(2^N-1)^2 over the
// symmetric max of the two directional mean squared nearest-neighbor
// distances, capped at 100 dB. Exact nearest neighbors via expanding
// grid-bucket rings.
double d1_psnr(const SparseTensor3& a, const SparseTensor3& b);

double bits_per_point(std::size_t payload_bytes, std::uint64_t point_count);

struct RdPoint {
    double bpp = 0.0;
    double psnr = 0.0;
};

// Bjontegaard rate delta (percent) of `test` against `anchor`: cubic fit of
// log10(bpp) over PSNR, closed-form integration over the overlapping PSNR
// interval. Needs >= 4 points per curve and a non-empty overlap.
double bd_rate_percent(std::span<const RdPoint> anchor, std::span<const RdPoint> test);

struct FrameStat {
    std::uint32_t frame = 0;
    char type = 'I';
    std::size_t bytes = 0;
    double bpp = 0.0;
    double d1 = 0.0;
};
void write_csv_report(const std::vector<FrameStat>& stats, const std::string& path);

}  // namespace dpcc
