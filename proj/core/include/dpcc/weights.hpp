#pragma once

#include <map>
#include <string>

#include "dpcc/entropy.hpp"
#include "dpcc/sparse_nn.hpp"

namespace dpcc {

inline constexpr std::uint32_t kWeightsVersion = 1;

// The full learned parameter set: every convolution kernel addressed by its
// layer path plus the factorized entropy model. std::map keeps serialization
// order deterministic.
struct ModelWeights {
    std::uint32_t version = kWeightsVersion;
    int width = 32;
    std::map<std::string, ConvKernel> kernels;
    FactorizedModel entropy;
    bool has_entropy = false;
};

// Little-endian "SDPC" container with a trailing CRC32. serialize/deserialize
// work on byte buffers; the file wrappers return the buffer CRC, which doubles
// as the weight hash recorded in bitstreams.
std::vector<std::uint8_t> serialize_weights(const ModelWeights& w);
ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes);

std::uint32_t save_weights(const ModelWeights& w, const std::string& path);
ModelWeights load_weights(const std::string& path, std::uint32_t* hash_out = nullptr);

}  // namespace dpcc
