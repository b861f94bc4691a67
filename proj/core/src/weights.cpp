#include "dpcc/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace dpcc {

namespace {

const char kMagic[4] = {'S', 'D', 'P', 'C'};

struct Writer {
    std::vector<std::uint8_t> buf;

    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void u8(std::uint8_t v) { buf.push_back(v); }
    void u16(std::uint16_t v) {
        buf.push_back(v & 0xFF);
        buf.push_back(v >> 8);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back((v >> (8 * i)) & 0xFF);
    }
    void f32s(const std::vector<float>& v) {
        static_assert(std::endian::native == std::endian::little);
        raw(v.data(), v.size() * sizeof(float));
    }
    void str(const std::string& s) {
        u16(static_cast<std::uint16_t>(s.size()));
        raw(s.data(), s.size());
    }
};

struct Reader {
    std::span<const std::uint8_t> buf;
    std::size_t pos = 0;

    void raw(void* p, std::size_t n) {
        if (pos + n > buf.size()) throw FormatError("weights: truncated file");
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        raw(&v, 1);
        return v;
    }
    std::uint16_t u16() {
        std::uint8_t b[2];
        raw(b, 2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32() {
        std::uint8_t b[4];
        raw(b, 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) |
               (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::vector<float> f32s(std::size_t n) {
        std::vector<float> v(n);
        raw(v.data(), n * sizeof(float));
        return v;
    }
    std::string str() {
        const std::uint16_t n = u16();
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
};

}  // namespace

std::vector<std::uint8_t> serialize_weights(const ModelWeights& w) {
    Writer out;
    out.raw(kMagic, 4);
    out.u32(w.version);
    out.u32(static_cast<std::uint32_t>(w.width));
    out.u32(static_cast<std::uint32_t>(w.kernels.size()));
    for (const auto& [path, k] : w.kernels) {
        out.str(path);
        out.u8(static_cast<std::uint8_t>(k.kernel_size));
        out.u16(static_cast<std::uint16_t>(k.in_channels));
        out.u16(static_cast<std::uint16_t>(k.out_channels));
        out.u8(k.bias.empty() ? 0 : 1);
        out.f32s(k.weights);
        out.f32s(k.bias);
    }
    out.u8(w.has_entropy ? 1 : 0);
    if (w.has_entropy) {
        out.u16(static_cast<std::uint16_t>(w.entropy.channels()));
        out.u16(static_cast<std::uint16_t>(w.entropy.support_radius()));
        out.f32s(w.entropy.logits());
        out.u8(w.entropy.frozen() ? 1 : 0);
        if (w.entropy.frozen()) {
            for (std::uint16_t f : w.entropy.raw_freqs()) out.u16(f);
        }
    }
    out.u32(crc32(out.buf.data(), out.buf.size()));
    return std::move(out.buf);
}

ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw FormatError("weights: truncated file");
    const std::uint32_t stored_crc =
        static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
        (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
        (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
        (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
    if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
        throw FormatError("weights: checksum mismatch");

    Reader in{bytes.first(bytes.size() - 4)};
    char magic[4];
    in.raw(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("weights: bad magic bytes");

    ModelWeights w;
    w.version = in.u32();
    if (w.version != kWeightsVersion)
        throw FormatError("weights: unknown format version");
    w.width = static_cast<int>(in.u32());
    const std::uint32_t n_kernels = in.u32();
    for (std::uint32_t i = 0; i < n_kernels; ++i) {
        const std::string path = in.str();
        const int K = in.u8();
        const int ci = in.u16();
        const int co = in.u16();
        const bool has_bias = in.u8() != 0;
        ConvKernel k = ConvKernel::make(K, ci, co, has_bias);
        k.weights = in.f32s(k.weights.size());
        if (has_bias) k.bias = in.f32s(static_cast<std::size_t>(co));
        w.kernels.emplace(path, std::move(k));
    }
    if (in.u8() != 0) {
        const int channels = in.u16();
        const int L = in.u16();
        FactorizedModel fm(channels, L);
        fm.logits() = in.f32s(fm.logits().size());
        if (in.u8() != 0) {
            std::vector<std::uint16_t> freqs(fm.logits().size());
            for (auto& f : freqs) f = in.u16();
            fm.set_raw_freqs(std::move(freqs));
        }
        w.entropy = std::move(fm);
        w.has_entropy = true;
    }
    if (in.pos != in.buf.size())
        throw FormatError("weights: trailing bytes in file");
    return w;
}

std::uint32_t save_weights(const ModelWeights& w, const std::string& path) {
    const std::vector<std::uint8_t> bytes = serialize_weights(w);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open weight file for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to weight file: " + path);
    // Content hash = the embedded checksum (CRC of everything but the
    // trailer); hashing the whole file would always yield the CRC residue.
    return crc32(bytes.data(), bytes.size() - 4);
}

ModelWeights load_weights(const std::string& path, std::uint32_t* hash_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open weight file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    ModelWeights w = deserialize_weights(bytes);
    if (hash_out) *hash_out = crc32(bytes.data(), bytes.size() - 4);
    return w;
}

}  // namespace dpcc
