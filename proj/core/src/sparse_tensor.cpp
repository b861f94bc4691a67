#include "dpcc/sparse_tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <zlib.h>

namespace dpcc {

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed) {
    return static_cast<std::uint32_t>(
        ::crc32(seed, static_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

namespace {

// Spreads the low 16 bits of v so that bit j lands at bit 3j.
std::uint64_t spread3(std::uint64_t v) {
    v &= 0xFFFFull;
    v = (v | v << 32) & 0x001F00000000FFFFull;
    v = (v | v << 16) & 0x001F0000FF0000FFull;
    v = (v | v << 8) & 0x100F00F00F00F00Full;
    v = (v | v << 4) & 0x10C30C30C30C30C3ull;
    v = (v | v << 2) & 0x1249249249249249ull;
    return v;
}

std::uint32_t compact3(std::uint64_t v) {
    v &= 0x1249249249249249ull;
    v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3ull;
    v = (v ^ (v >> 4)) & 0x100F00F00F00F00Full;
    v = (v ^ (v >> 8)) & 0x001F0000FF0000FFull;
    v = (v ^ (v >> 16)) & 0x001F00000000FFFFull;
    v = (v ^ (v >> 32)) & 0xFFFFull;
    return static_cast<std::uint32_t>(v);
}

}  // namespace

MortonKey morton_encode(const Coord3& c) {
    if (c.x >= (1u << kMaxBitDepth) || c.y >= (1u << kMaxBitDepth) ||
        c.z >= (1u << kMaxBitDepth)) {
        throw std::out_of_range("morton_encode: component exceeds 16-bit range");
    }
    return (spread3(c.x) << 2) | (spread3(c.y) << 1) | spread3(c.z);
}

Coord3 morton_decode(MortonKey key) {
    return Coord3{compact3(key >> 2), compact3(key >> 1), compact3(key)};
}

SparseTensor3 SparseTensor3::canonicalize(std::vector<Coord3> coords,
                                          std::vector<float> feats, int channels,
                                          int bit_depth) {
    if (channels < 1) throw ShapeError("canonicalize: channel count must be >= 1");
    if (bit_depth < 0 || bit_depth > kMaxBitDepth)
        throw std::out_of_range("canonicalize: bit depth out of range");
    if (feats.size() != coords.size() * static_cast<std::size_t>(channels))
        throw ShapeError("canonicalize: feature matrix size mismatch");

    const std::uint32_t limit = 1u << bit_depth;
    std::vector<MortonKey> keys(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const Coord3& c = coords[i];
        if (c.x >= limit || c.y >= limit || c.z >= limit)
            throw std::out_of_range("canonicalize: coordinate exceeds 2^bit_depth");
        keys[i] = morton_encode(c);
    }
    for (float v : feats) {
        if (!std::isfinite(v))
            throw ShapeError("canonicalize: non-finite feature value");
    }

    std::vector<std::uint32_t> perm(coords.size());
    std::iota(perm.begin(), perm.end(), 0u);
    std::sort(perm.begin(), perm.end(),
              [&](std::uint32_t a, std::uint32_t b) { return keys[a] < keys[b]; });

    SparseTensor3 t;
    t.channels_ = channels;
    t.bit_depth_ = bit_depth;
    t.coords_.resize(coords.size());
    t.feats_.resize(feats.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (i > 0 && keys[perm[i]] == keys[perm[i - 1]])
            throw DuplicateCoordinateError("canonicalize: duplicate coordinate");
        t.coords_[i] = coords[perm[i]];
        const float* src = feats.data() + static_cast<std::size_t>(perm[i]) * channels;
        std::copy(src, src + channels, t.feats_.data() + i * channels);
    }
    return t;
}

SparseTensor3 SparseTensor3::from_sorted(std::vector<Coord3> coords,
                                         std::vector<float> feats, int channels,
                                         int bit_depth) {
    SparseTensor3 t;
    t.coords_ = std::move(coords);
    t.feats_ = std::move(feats);
    t.channels_ = channels;
    t.bit_depth_ = bit_depth;
    return t;
}

SparseTensor3 make_occupancy(std::vector<Coord3> sorted_coords, int bit_depth) {
    std::vector<float> ones(sorted_coords.size(), 1.0f);
    return SparseTensor3::from_sorted(std::move(sorted_coords), std::move(ones), 1,
                                      bit_depth);
}

std::vector<Coord3> downsample_coords(std::span<const Coord3> sorted) {
    std::vector<Coord3> out;
    out.reserve(sorted.size());
    for (const Coord3& c : sorted) {
        Coord3 p{c.x >> 1, c.y >> 1, c.z >> 1};
        // Morton order is preserved under the per-axis shift, so consecutive
        // children map to consecutive (possibly equal) parents.
        if (out.empty() || !(out.back() == p)) out.push_back(p);
    }
    return out;
}

std::vector<Coord3> child_candidates(std::span<const Coord3> sorted) {
    std::vector<Coord3> out;
    out.reserve(sorted.size() * 8);
    for (const Coord3& p : sorted) {
        const std::uint32_t bx = p.x << 1, by = p.y << 1, bz = p.z << 1;
        // {0,1}^3 in Morton order of the children themselves.
        for (std::uint32_t d = 0; d < 8; ++d) {
            out.push_back(Coord3{bx + ((d >> 2) & 1u), by + ((d >> 1) & 1u),
                                 bz + (d & 1u)});
        }
    }
    return out;
}

MortonMap::MortonMap(std::span<const Coord3> coords) {
    std::size_t cap = 8;
    while (cap < coords.size() * 2) cap <<= 1;
    keys_.assign(cap, kEmpty);
    vals_.assign(cap, 0);
    mask_ = cap - 1;
    for (std::size_t r = 0; r < coords.size(); ++r) {
        const MortonKey key = morton_encode(coords[r]);
        std::size_t i = hash(key) & mask_;
        while (keys_[i] != kEmpty) i = (i + 1) & mask_;
        keys_[i] = key;
        vals_[i] = static_cast<std::uint32_t>(r);
    }
}

}  // namespace dpcc
