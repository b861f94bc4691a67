#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dpcc/common.hpp"

namespace dpcc {

// Non-negative voxel coordinate. Valid components are < 2^N for the bit depth
// N of the scale the coordinate lives at, and always < 2^16 so a Morton key
// fits in 64 bits.
struct Coord3 {
    std::uint32_t x = 0, y = 0, z = 0;
    friend bool operator==(const Coord3&, const Coord3&) = default;
};

using MortonKey = std::uint64_t;

inline constexpr int kMaxBitDepth = 16;

// Interleaves bits as x -> bit 3j+2, y -> bit 3j+1, z -> bit 3j. This order is
// the canonical order of every coordinate list in the codec; the bitstream
// depends on it.
MortonKey morton_encode(const Coord3& c);
Coord3 morton_decode(MortonKey key);

// 4*(x%2) + 2*(y%2) + (z%2): the octant-parity group of a voxel, which is also
// the stage id in 8-stage occupancy coding.
inline int octant_index(const Coord3& c) {
    return static_cast<int>(4 * (c.x & 1u) + 2 * (c.y & 1u) + (c.z & 1u));
}

// Morton-ordered coordinate set with an aligned row-major feature matrix.
class SparseTensor3 {
  public:
    SparseTensor3() = default;

    // Sorts by Morton key and validates. Throws DuplicateCoordinateError on
    // repeated coordinates, ShapeError on size mismatch, std::out_of_range on
    // coordinates outside [0, 2^bit_depth).
    static SparseTensor3 canonicalize(std::vector<Coord3> coords,
                                      std::vector<float> feats, int channels,
                                      int bit_depth);

    // Trusted constructor for internally produced, already Morton-sorted data.
    static SparseTensor3 from_sorted(std::vector<Coord3> coords,
                                     std::vector<float> feats, int channels,
                                     int bit_depth);

    std::size_t size() const { return coords_.size(); }
    bool empty() const { return coords_.empty(); }
    int channels() const { return channels_; }
    int bit_depth() const { return bit_depth_; }

    const std::vector<Coord3>& coords() const { return coords_; }
    const std::vector<float>& feats() const { return feats_; }
    std::vector<float>& feats() { return feats_; }

    std::span<const float> row(std::size_t i) const {
        return {feats_.data() + i * channels_, static_cast<std::size_t>(channels_)};
    }

  private:
    std::vector<Coord3> coords_;
    std::vector<float> feats_;  // row i <-> coords_[i], channels_ entries each
    int channels_ = 0;
    int bit_depth_ = 0;
};

// Geometry-only tensor: all-ones single feature channel.
SparseTensor3 make_occupancy(std::vector<Coord3> sorted_coords, int bit_depth);

// Floor-divides every coordinate by 2, deduplicates, Morton-sorts. Input must
// be Morton-sorted. Result lives one scale below.
std::vector<Coord3> downsample_coords(std::span<const Coord3> sorted);

// The 8 children {2p + d : d in {0,1}^3} of every parent, globally
// Morton-sorted. Input must be Morton-sorted and unique.
std::vector<Coord3> child_candidates(std::span<const Coord3> sorted);

// Open-addressing map from Morton key to row index, used for neighbor lookup
// in sparse convolutions.
class MortonMap {
  public:
    MortonMap() = default;
    explicit MortonMap(std::span<const Coord3> coords);

    // Returns the row index or -1.
    std::int64_t find(MortonKey key) const {
        if (keys_.empty()) return -1;
        std::size_t i = hash(key) & mask_;
        while (true) {
            const std::uint64_t k = keys_[i];
            if (k == key) return vals_[i];
            if (k == kEmpty) return -1;
            i = (i + 1) & mask_;
        }
    }

  private:
    static constexpr std::uint64_t kEmpty = ~0ull;
    static std::size_t hash(std::uint64_t k) {
        k += 0x9e3779b97f4a7c15ull;
        k = (k ^ (k >> 30)) * 0xbf58476d1ce4e5b9ull;
        k = (k ^ (k >> 27)) * 0x94d049bb133111ebull;
        return static_cast<std::size_t>(k ^ (k >> 31));
    }

    std::vector<std::uint64_t> keys_;
    std::vector<std::uint32_t> vals_;
    std::size_t mask_ = 0;
};

}  // namespace dpcc
