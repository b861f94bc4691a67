#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpcc {

// Error taxonomy shared by all modules. Everything is a std::runtime_error so
// callers that only want a message can catch the base type.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DuplicateCoordinateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DecodeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// CRC32 (zlib polynomial) over a byte buffer, seeded with `seed` to allow
// incremental use.
std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0);

}  // namespace dpcc
