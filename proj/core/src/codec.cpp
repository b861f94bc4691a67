#include "dpcc/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace dpcc {

namespace {

const char kStreamMagic[4] = {'S', 'D', 'P', 'B'};

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xFF);
}
void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back((v >> (8 * i)) & 0xFF);
}

struct StreamReader {
    std::span<const std::uint8_t> buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw DecodeError("bitstream: truncated");
    }
    std::uint8_t u8() {
        need(1);
        return buf[pos++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos++]) << (8 * i);
        return v;
    }
    std::vector<std::uint8_t> bytes(std::size_t n) {
        need(n);
        std::vector<std::uint8_t> v(buf.begin() + pos, buf.begin() + pos + n);
        pos += n;
        return v;
    }
};

float quantized_prob_value(QuantProb q) { return q.p16 / 65536.0f; }

}  // namespace

void EncodeConfig::validate() const {
    if (bit_depth < 1 || bit_depth > kMaxBitDepth)
        throw FormatError("EncodeConfig: bit depth out of range");
    if (mode == Mode::Lossy && (m < 1 || m >= bit_depth))
        throw FormatError("EncodeConfig: lossy mode requires 1 <= m < bit_depth");
    if (residual_baseline && mode != Mode::Lossy)
        throw FormatError("EncodeConfig: residual baseline is a lossy-only mode");
}

std::size_t payload_bytes(const FrameRecord& rec) {
    std::size_t n = 0;
    for (const auto& p : rec.payloads) n += p.size();
    return n;
}

std::size_t payload_bytes(const Bitstream& bs) {
    std::size_t n = 0;
    for (const auto& f : bs.frames) n += payload_bytes(f);
    return n;
}

std::vector<std::uint8_t> serialize_bitstream(const Bitstream& bs) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kStreamMagic, kStreamMagic + 4);
    out.push_back(bs.version);
    out.push_back(static_cast<std::uint8_t>(bs.config.mode));
    out.push_back(static_cast<std::uint8_t>(bs.config.m));
    out.push_back(static_cast<std::uint8_t>(bs.config.model_id));
    out.push_back(bs.config.inter_enabled ? 1 : 0);
    out.push_back(bs.config.residual_baseline ? 1 : 0);
    out.push_back(static_cast<std::uint8_t>(bs.config.bit_depth));
    put_u32(out, bs.weight_hash);
    put_u32(out, static_cast<std::uint32_t>(bs.frames.size()));
    for (const FrameRecord& f : bs.frames) {
        put_u32(out, f.header.frame_index);
        out.push_back(f.header.frame_type);
        put_u64(out, f.header.point_count);
        put_u32(out, static_cast<std::uint32_t>(f.header.scale_counts.size()));
        for (std::uint32_t c : f.header.scale_counts) put_u32(out, c);
        out.push_back(static_cast<std::uint8_t>(f.payloads.size()));
        for (const auto& p : f.payloads) put_u32(out, static_cast<std::uint32_t>(p.size()));
        for (const auto& p : f.payloads) out.insert(out.end(), p.begin(), p.end());
    }
    put_u32(out, crc32(out.data(), out.size()));
    return out;
}

Bitstream deserialize_bitstream(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw DecodeError("bitstream: truncated");
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
        stored |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
    if (crc32(bytes.data(), bytes.size() - 4) != stored)
        throw DecodeError("bitstream: checksum mismatch");

    StreamReader in{bytes.first(bytes.size() - 4)};
    char magic[4];
    in.need(4);
    std::memcpy(magic, bytes.data(), 4);
    in.pos = 4;
    if (std::memcmp(magic, kStreamMagic, 4) != 0)
        throw DecodeError("bitstream: bad magic bytes");

    Bitstream bs;
    bs.version = in.u8();
    if (bs.version != 1) throw DecodeError("bitstream: unknown version");
    bs.config.mode = static_cast<EncodeConfig::Mode>(in.u8());
    bs.config.m = in.u8();
    bs.config.model_id = in.u8();
    bs.config.inter_enabled = in.u8() != 0;
    bs.config.residual_baseline = in.u8() != 0;
    bs.config.bit_depth = in.u8();
    bs.weight_hash = in.u32();
    const std::uint32_t n_frames = in.u32();
    bs.frames.resize(n_frames);
    for (FrameRecord& f : bs.frames) {
        f.header.frame_index = in.u32();
        f.header.frame_type = in.u8();
        f.header.point_count = in.u64();
        const std::uint32_t n_counts = in.u32();
        f.header.scale_counts.resize(n_counts);
        for (auto& c : f.header.scale_counts) c = in.u32();
        const std::uint8_t n_payloads = in.u8();
        std::vector<std::uint32_t> lens(n_payloads);
        for (auto& l : lens) l = in.u32();
        for (std::uint32_t l : lens) f.payloads.push_back(in.bytes(l));
    }
    if (in.pos != in.buf.size()) throw DecodeError("bitstream: trailing bytes");
    bs.config.validate();
    return bs;
}

void save_bitstream(const Bitstream& bs, const std::string& path) {
    const auto bytes = serialize_bitstream(bs);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open stream file for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to stream file: " + path);
}

Bitstream load_bitstream(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open stream file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return deserialize_bitstream(bytes);
}

Codec::Codec(Model& model, EncodeConfig config, std::uint32_t weight_hash)
    : model_(model), config_(config), weight_hash_(weight_hash) {
    config_.validate();
}

int Codec::lossless_top_scale() const {
    return config_.mode == EncodeConfig::Mode::Lossless ? config_.bit_depth : config_.m;
}

int Codec::base_scale() const { return std::min(3, lossless_top_scale()); }

std::vector<std::vector<Coord3>> Codec::build_pyramid(const SparseTensor3& frame) const {
    const int n = config_.bit_depth;
    if (frame.bit_depth() != n)
        throw ShapeError("Codec: frame bit depth does not match configuration");
    std::vector<std::vector<Coord3>> pyr(static_cast<std::size_t>(n) + 1);
    pyr[static_cast<std::size_t>(n)] = frame.coords();
    for (int s = n - 1; s >= base_scale(); --s)
        pyr[static_cast<std::size_t>(s)] =
            downsample_coords(pyr[static_cast<std::size_t>(s + 1)]);
    return pyr;
}

namespace {

void log_prob(std::vector<std::uint16_t>* log, QuantProb q) {
    if (log) log->push_back(q.p16);
}

// Raw p=1/2 coding of the full base-scale grid in Morton order.
void encode_base_grid(RangeEncoder& coder, std::span<const Coord3> occupied,
                      int scale, std::vector<std::uint16_t>* prob_log) {
    const QuantProb half{32768};
    const std::uint64_t cells = 1ull << (3 * scale);
    std::size_t next = 0;
    for (std::uint64_t key = 0; key < cells; ++key) {
        const bool occ =
            next < occupied.size() && morton_encode(occupied[next]) == key;
        coder.encode_bit(half, occ ? 1 : 0);
        log_prob(prob_log, half);
        if (occ) ++next;
    }
    if (next != occupied.size())
        throw StateError("encode_base_grid: coordinates beyond the base grid");
}

std::vector<Coord3> decode_base_grid(RangeDecoder& coder, int scale,
                                     std::vector<std::uint16_t>* prob_log) {
    const QuantProb half{32768};
    const std::uint64_t cells = 1ull << (3 * scale);
    std::vector<Coord3> out;
    for (std::uint64_t key = 0; key < cells; ++key) {
        log_prob(prob_log, half);
        if (coder.decode_bit(half)) out.push_back(morton_decode(key));
    }
    return out;
}

// Top-k candidate selection by quantized probability; ties break toward the
// lower Morton key (lower candidate index).
std::vector<Coord3> select_top_k(const OccupancyPrediction& pred, std::size_t k,
                                 std::vector<std::uint16_t>* prob_log) {
    std::vector<std::uint16_t> q(pred.probs.size());
    for (std::size_t i = 0; i < q.size(); ++i) {
        q[i] = quantize_prob(pred.probs[i]).p16;
        log_prob(prob_log, QuantProb{q[i]});
    }
    k = std::min(k, q.size());
    std::vector<std::uint32_t> idx(q.size());
    std::iota(idx.begin(), idx.end(), 0u);
    std::sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
        return q[a] != q[b] ? q[a] > q[b] : a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    std::vector<Coord3> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = pred.coords[idx[i]];
    return out;
}

std::vector<std::int32_t> round_symbols(const std::vector<float>& v) {
    std::vector<std::int32_t> s(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        s[i] = static_cast<std::int32_t>(std::lround(v[i]));
    return s;
}

}  // namespace

FrameRecord Codec::encode_frame(const SparseTensor3& frame, const FrameContext* ref,
                                const SparseTensor3* ref_recon,
                                std::uint32_t frame_index, SparseTensor3* recon_out,
                                std::vector<std::uint16_t>* prob_log) {
    const int n = config_.bit_depth;
    const int s_base = base_scale();
    const int s_top = lossless_top_scale();
    const bool is_p = ref != nullptr;
    if (is_p && ref_recon == nullptr)
        throw StateError("encode_frame: P frame requires the reference reconstruction");
    const bool conditional = is_p && config_.inter_enabled && !config_.residual_baseline;

    const auto pyramid = build_pyramid(frame);

    FrameRecord rec;
    rec.header.frame_index = frame_index;
    rec.header.frame_type = is_p ? 1 : 0;
    rec.header.point_count = frame.size();

    // --- lossless phase ---
    RangeEncoder geom;
    encode_base_grid(geom, pyramid[static_cast<std::size_t>(s_base)], s_base, prob_log);
    for (int s = s_base; s < s_top; ++s) {
        const auto& coords_s = pyramid[static_cast<std::size_t>(s)];
        const auto& truth = pyramid[static_cast<std::size_t>(s + 1)];
        const MortonMap truth_map(truth);
        PriorBundle bundle;
        bundle.scale = s;
        bundle.spatial = model_.lift_spatial(nullptr, coords_s, s);
        bundle.temporal = conditional
                              ? model_.predictor_transfer(
                                    nullptr, constant(ref->at(s)), coords_s, s)
                              : model_.zero_temporal(coords_s, s);
        auto cb = [&](int, std::span<const Coord3> coords,
                      std::span<const float> probs) {
            std::vector<std::uint8_t> bits(coords.size());
            for (std::size_t i = 0; i < coords.size(); ++i) {
                bits[i] = truth_map.find(morton_encode(coords[i])) >= 0 ? 1 : 0;
                const QuantProb q = quantize_prob(probs[i]);
                geom.encode_bit(q, bits[i]);
                log_prob(prob_log, q);
            }
            return bits;
        };
        const std::vector<Coord3> decided = sopa_8stage(model_, nullptr, bundle, cb);
        if (decided != truth)
            throw StateError("encode_frame: stage reconstruction diverged from truth");
    }

    SparseTensor3 recon;
    if (config_.mode == EncodeConfig::Mode::Lossless) {
        rec.payloads.push_back(geom.finish());
        recon = make_occupancy(pyramid[static_cast<std::size_t>(n)], n);
    } else {
        // --- latent ---
        const int steps = n - s_top;
        Traced latent = model_.encode_latent(nullptr, frame, steps);
        const auto& latent_coords = latent.value.coords();
        if (latent_coords != pyramid[static_cast<std::size_t>(s_top)])
            throw StateError("encode_frame: latent coordinates diverged from pyramid");

        std::vector<float> decoded_feats;
        std::vector<std::int32_t> symbols;
        if (config_.residual_baseline && is_p) {
            Traced ref_latent = model_.encode_latent(nullptr, *ref_recon, steps);
            Traced pred = sparse_conv(nullptr, ref_latent, model_.kernel("residual.pred"),
                                      latent_coords, s_top);
            std::vector<float> resid = latent.value.feats();
            for (std::size_t i = 0; i < resid.size(); ++i)
                resid[i] -= pred.value.feats()[i];
            symbols = round_symbols(resid);
            decoded_feats = pred.value.feats();
            for (std::size_t i = 0; i < decoded_feats.size(); ++i)
                decoded_feats[i] += static_cast<float>(symbols[i]);
        } else {
            symbols = round_symbols(latent.value.feats());
            decoded_feats.assign(symbols.begin(), symbols.end());
        }

        RangeEncoder lat_coder;
        encode_latents(lat_coder, symbols, model_.width(), model_.entropy());

        // --- lossy phase (closed-loop reconstruction) ---
        Traced lat_tensor = constant(SparseTensor3::from_sorted(
            latent_coords, std::move(decoded_feats), model_.width(), s_top));
        std::vector<Coord3> recon_coords = pyramid[static_cast<std::size_t>(s_top)];
        Traced carried = model_.carry_latent(nullptr, lat_tensor, recon_coords, s_top);
        for (int s = s_top; s < n; ++s) {
            PriorBundle bundle;
            bundle.scale = s;
            bundle.spatial = model_.lift_spatial(nullptr, recon_coords, s);
            bundle.temporal = conditional
                                  ? model_.predictor_transfer(
                                        nullptr, constant(ref->at(s)), recon_coords, s)
                                  : model_.zero_temporal(recon_coords, s);
            const OccupancyPrediction pred =
                sopa_1stage(model_, nullptr, bundle, &carried, nullptr);
            const std::uint32_t k = static_cast<std::uint32_t>(
                pyramid[static_cast<std::size_t>(s + 1)].size());
            rec.header.scale_counts.push_back(k);
            recon_coords = select_top_k(pred, k, prob_log);
            if (s + 1 < n)
                carried = model_.carry_latent(
                    nullptr, Model::upscale_coords(nullptr, carried), recon_coords,
                    s + 1);
        }
        rec.payloads.push_back(geom.finish());
        rec.payloads.push_back(lat_coder.finish());
        recon = make_occupancy(std::move(recon_coords), n);
    }

    if (recon_out) *recon_out = std::move(recon);
    return rec;
}

SparseTensor3 Codec::decode_frame(const FrameRecord& rec, const FrameContext* ref,
                                  const SparseTensor3* ref_recon,
                                  std::vector<std::uint16_t>* prob_log) {
    const int n = config_.bit_depth;
    const int s_base = base_scale();
    const int s_top = lossless_top_scale();
    const bool is_p = rec.header.frame_type == 1;
    if (is_p && (ref == nullptr || ref_recon == nullptr))
        throw DecodeError("decode_frame: P frame requires a reference");
    const bool conditional = is_p && config_.inter_enabled && !config_.residual_baseline;
    const std::size_t expected_payloads =
        config_.mode == EncodeConfig::Mode::Lossless ? 1 : 2;
    if (rec.payloads.size() != expected_payloads)
        throw DecodeError("decode_frame: unexpected payload count");

    RangeDecoder geom(rec.payloads[0]);
    std::vector<Coord3> coords = decode_base_grid(geom, s_base, prob_log);
    for (int s = s_base; s < s_top; ++s) {
        PriorBundle bundle;
        bundle.scale = s;
        bundle.spatial = model_.lift_spatial(nullptr, coords, s);
        bundle.temporal = conditional
                              ? model_.predictor_transfer(nullptr, constant(ref->at(s)),
                                                          coords, s)
                              : model_.zero_temporal(coords, s);
        auto cb = [&](int, std::span<const Coord3> stage_coords,
                      std::span<const float> probs) {
            std::vector<std::uint8_t> bits(stage_coords.size());
            for (std::size_t i = 0; i < stage_coords.size(); ++i) {
                const QuantProb q = quantize_prob(probs[i]);
                bits[i] = static_cast<std::uint8_t>(geom.decode_bit(q));
                log_prob(prob_log, q);
            }
            return bits;
        };
        coords = sopa_8stage(model_, nullptr, bundle, cb);
    }

    if (config_.mode == EncodeConfig::Mode::Lossless)
        return make_occupancy(std::move(coords), n);

    // --- lossy phase ---
    if (rec.header.scale_counts.size() != static_cast<std::size_t>(n - s_top))
        throw DecodeError("decode_frame: scale count list does not match config");

    RangeDecoder lat_coder(rec.payloads[1]);
    const std::vector<std::int32_t> symbols =
        decode_latents(lat_coder, coords.size(), model_.width(), model_.entropy());

    std::vector<float> decoded_feats;
    const int steps = n - s_top;
    if (config_.residual_baseline && is_p) {
        Traced ref_latent = model_.encode_latent(nullptr, *ref_recon, steps);
        Traced pred = sparse_conv(nullptr, ref_latent, model_.kernel("residual.pred"),
                                  coords, s_top);
        decoded_feats = pred.value.feats();
        for (std::size_t i = 0; i < decoded_feats.size(); ++i)
            decoded_feats[i] += static_cast<float>(symbols[i]);
    } else {
        decoded_feats.assign(symbols.begin(), symbols.end());
    }

    Traced lat_tensor = constant(SparseTensor3::from_sorted(
        coords, std::move(decoded_feats), model_.width(), s_top));
    Traced carried = model_.carry_latent(nullptr, lat_tensor, coords, s_top);
    for (int s = s_top; s < n; ++s) {
        PriorBundle bundle;
        bundle.scale = s;
        bundle.spatial = model_.lift_spatial(nullptr, coords, s);
        bundle.temporal = conditional
                              ? model_.predictor_transfer(nullptr, constant(ref->at(s)),
                                                          coords, s)
                              : model_.zero_temporal(coords, s);
        const OccupancyPrediction pred =
            sopa_1stage(model_, nullptr, bundle, &carried, nullptr);
        const std::uint32_t k =
            rec.header.scale_counts[static_cast<std::size_t>(s - s_top)];
        coords = select_top_k(pred, k, prob_log);
        if (s + 1 < n)
            carried = model_.carry_latent(
                nullptr, Model::upscale_coords(nullptr, carried), coords, s + 1);
    }
    return make_occupancy(std::move(coords), n);
}

Bitstream Codec::encode_sequence(const std::vector<SparseTensor3>& frames,
                                 std::vector<SparseTensor3>* recons_out,
                                 const std::vector<std::uint64_t>* point_counts) {
    if (frames.empty()) throw ShapeError("encode_sequence: needs at least one frame");
    Bitstream bs;
    bs.config = config_;
    bs.weight_hash = weight_hash_;

    SparseTensor3 prev_recon;
    for (std::size_t t = 0; t < frames.size(); ++t) {
        FrameContext ctx;
        const bool use_ref = t > 0 && config_.inter_enabled;
        if (use_ref) ctx = model_.extract_pyramid(prev_recon, base_scale());
        SparseTensor3 recon;
        FrameRecord rec = encode_frame(frames[t], use_ref ? &ctx : nullptr,
                                       use_ref ? &prev_recon : nullptr,
                                       static_cast<std::uint32_t>(t), &recon);
        if (point_counts) rec.header.point_count = (*point_counts)[t];
        if (recons_out) recons_out->push_back(recon);
        bs.frames.push_back(std::move(rec));
        prev_recon = std::move(recon);
    }
    return bs;
}

std::vector<SparseTensor3> Codec::decode_sequence(const Bitstream& bs) {
    std::vector<SparseTensor3> out;
    SparseTensor3 prev_recon;
    for (std::size_t t = 0; t < bs.frames.size(); ++t) {
        const FrameRecord& rec = bs.frames[t];
        FrameContext ctx;
        const bool use_ref = rec.header.frame_type == 1;
        if (use_ref) ctx = model_.extract_pyramid(prev_recon, base_scale());
        SparseTensor3 recon = decode_frame(rec, use_ref ? &ctx : nullptr,
                                           use_ref ? &prev_recon : nullptr);
        prev_recon = recon;
        out.push_back(std::move(recon));
    }
    return out;
}

}  // namespace dpcc
