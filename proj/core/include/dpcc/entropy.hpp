#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dpcc/autograd.hpp"
#include "dpcc/common.hpp"

namespace dpcc {

// Probability of the bit being 1, quantized to p16/65536 with p16 in
// [1, 65535] so both symbols stay codable. Encoder and decoder always work
// from the quantized value.
struct QuantProb {
    std::uint16_t p16;
};

// round(p * 65536) clamped to [1, 65535]. Throws on NaN.
QuantProb quantize_prob(float p);

// -log2 of the quantized probability assigned to `bit`.
double bit_cost(QuantProb q, int bit);

// Sum of -log2 q(bit_i) over a stream, using quantized probabilities.
double rate_estimate(std::span<const QuantProb> probs,
                     std::span<const std::uint8_t> bits);

// Carry-aware binary/multisymbol range coder: 32-bit range, byte-wise
// renormalization when range drops below 2^24.
class RangeEncoder {
  public:
    void encode_bit(QuantProb q, int bit);
    // Subrange [cum_lo, cum_lo+freq) of a 65536-total cumulative table.
    void encode_span(std::uint32_t cum_lo, std::uint32_t freq);
    // Exp-Golomb code of a non-negative integer at p=0.5 per bit.
    void encode_exp_golomb(std::uint64_t v);

    std::vector<std::uint8_t> finish();
    std::size_t size_bytes() const { return out_.size(); }

  private:
    void shift_low();

    std::uint64_t low_ = 0;
    std::uint32_t range_ = 0xFFFFFFFFu;
    std::uint8_t cache_ = 0;
    std::uint64_t cache_size_ = 1;
    std::vector<std::uint8_t> out_;
};

class RangeDecoder {
  public:
    explicit RangeDecoder(std::span<const std::uint8_t> bytes);

    int decode_bit(QuantProb q);
    // Returns the 16-bit cumulative position of the next symbol; the caller
    // locates the symbol in its table and then calls consume_span.
    std::uint32_t peek_cum();
    void consume_span(std::uint32_t cum_lo, std::uint32_t freq);
    std::uint64_t decode_exp_golomb();

    std::size_t consumed_bytes() const { return pos_; }

  private:
    std::uint8_t next_byte();

    std::span<const std::uint8_t> buf_;
    std::size_t pos_ = 0;
    std::uint32_t range_ = 0xFFFFFFFFu;
    std::uint32_t code_ = 0;
};

// Per-channel learned prior over integer symbols in [-L, L], trained as
// logits and frozen to 16-bit-total cumulative frequency tables for coding.
// Symbols beyond the support escape through the boundary symbol followed by
// an Exp-Golomb coded overflow.
class FactorizedModel {
  public:
    FactorizedModel() = default;
    FactorizedModel(int channels, int L);

    int channels() const { return channels_; }
    int support_radius() const { return L_; }
    int table_size() const { return 2 * L_ + 1; }
    bool frozen() const { return frozen_; }

    std::vector<float>& logits() { return logits_; }
    const std::vector<float>& logits() const { return logits_; }
    std::vector<float>& logit_grad();

    // Quantizes the softmax of the logits into frequency tables with total
    // mass 65536 and every bin >= 1.
    void freeze();
    void unfreeze() { frozen_ = false; }

    // Frozen-table access; symbol index is s + L.
    std::uint32_t freq(int channel, int index) const;
    std::uint32_t cum(int channel, int index) const;
    // -log2 of the frozen probability mass of `symbol` (clamped into support).
    double symbol_cost_bits(int channel, std::int32_t symbol) const;

    const std::vector<std::uint16_t>& raw_freqs() const { return freqs_; }
    void set_raw_freqs(std::vector<std::uint16_t> freqs);

  private:
    int channels_ = 0;
    int L_ = 0;
    std::vector<float> logits_;        // [channels][2L+1]
    std::vector<float> logit_grad_;
    std::vector<std::uint16_t> freqs_;  // frozen, [channels][2L+1]
    std::vector<std::uint32_t> cums_;   // frozen, [channels][2L+2]
    bool frozen_ = false;
};

// Row-major integer symbol matrix (one row per coordinate, one column per
// latent channel) coded with the model's frozen tables.
void encode_latents(RangeEncoder& coder, std::span<const std::int32_t> symbols,
                    int channels, const FactorizedModel& model);
std::vector<std::int32_t> decode_latents(RangeDecoder& coder, std::size_t rows,
                                         int channels, const FactorizedModel& model);

// Cross-entropy (bits) of a symbol matrix under the frozen tables, including
// escape costs. Matches the coded length up to coder overhead.
double latent_cost_bits(std::span<const std::int32_t> symbols, int channels,
                        const FactorizedModel& model);

// Differentiable training-time rate: sum of -log2 density(x) where the
// density linearly interpolates the per-channel softmax masses between
// integer bins. Differentiable in the logits and in the (noisy) inputs.
TracedScalar factorized_rate_bits(Tape* tape, const Traced& noisy_latent,
                                  FactorizedModel& model);

}  // namespace dpcc
