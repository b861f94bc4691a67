#pragma once

#include "dpcc/entropy.hpp"
#include "dpcc/sopa.hpp"

namespace dpcc {

struct EncodeConfig {
    enum class Mode : std::uint8_t { Lossless = 0, Lossy = 1 };

    Mode mode = Mode::Lossless;
    int m = 2;          // lossy mode: number of lossless-coded scales
    int model_id = 0;   // which trained weight slot produced the stream
    bool inter_enabled = true;
    bool residual_baseline = false;  // inter residual-coding ablation (lossy only)
    int bit_depth = 10;

    void validate() const;
};

struct FrameHeader {
    std::uint32_t frame_index = 0;
    std::uint8_t frame_type = 0;  // 0 = I, 1 = P
    std::uint64_t point_count = 0;
    // Lossy mode: true occupied count per reconstructed scale (coarse to
    // fine), consumed by top-k selection.
    std::vector<std::uint32_t> scale_counts;
};

struct FrameRecord {
    FrameHeader header;
    std::vector<std::vector<std::uint8_t>> payloads;  // geometry [, latents]
};

struct Bitstream {
    std::uint8_t version = 1;
    EncodeConfig config;
    std::uint32_t weight_hash = 0;
    std::vector<FrameRecord> frames;
};

std::vector<std::uint8_t> serialize_bitstream(const Bitstream& bs);
Bitstream deserialize_bitstream(std::span<const std::uint8_t> bytes);
void save_bitstream(const Bitstream& bs, const std::string& path);
Bitstream load_bitstream(const std::string& path);

std::size_t payload_bytes(const FrameRecord& rec);
std::size_t payload_bytes(const Bitstream& bs);

// Encode/decode pipelines. The encoder reconstructs its own lossy output so
// reference frames are formed closed-loop, identical to the decoder's.
class Codec {
  public:
    Codec(Model& model, EncodeConfig config, std::uint32_t weight_hash = 0);

    const EncodeConfig& config() const { return config_; }

    // ref/ref_recon must both be present for P frames and absent for I
    // frames. recon_out (optional) receives the decoder-identical
    // reconstruction; prob_log (optional) the quantized probability of every
    // coded or ranked symbol, for encoder/decoder symmetry checks.
    FrameRecord encode_frame(const SparseTensor3& frame, const FrameContext* ref,
                             const SparseTensor3* ref_recon, std::uint32_t frame_index,
                             SparseTensor3* recon_out = nullptr,
                             std::vector<std::uint16_t>* prob_log = nullptr);

    SparseTensor3 decode_frame(const FrameRecord& rec, const FrameContext* ref,
                               const SparseTensor3* ref_recon,
                               std::vector<std::uint16_t>* prob_log = nullptr);

    // Frame 0 intra, then P frames referencing the previous reconstruction
    // (the original in lossless mode). point_counts defaults to frame sizes.
    Bitstream encode_sequence(const std::vector<SparseTensor3>& frames,
                              std::vector<SparseTensor3>* recons_out = nullptr,
                              const std::vector<std::uint64_t>* point_counts = nullptr);

    std::vector<SparseTensor3> decode_sequence(const Bitstream& bs);

    // Coarsest coded scale: min(3, bit depth) in lossless mode, min(3, m) in
    // lossy mode. The grid at this scale is coded raw at p = 1/2.
    int base_scale() const;
    int lossless_top_scale() const;  // scale whose geometry is exact

  private:
    struct LatentPlan;

    std::vector<std::vector<Coord3>> build_pyramid(const SparseTensor3& frame) const;

    Model& model_;
    EncodeConfig config_;
    std::uint32_t weight_hash_;
};

}  // namespace dpcc
