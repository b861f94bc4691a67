#include "dpcc/entropy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

namespace dpcc {

namespace {
constexpr std::uint32_t kTopValue = 1u << 24;
constexpr double kInvLn2 = 1.4426950408889634;
}  // namespace

QuantProb quantize_prob(float p) {
    if (std::isnan(p)) throw std::invalid_argument("quantize_prob: NaN probability");
    const long q = std::lround(static_cast<double>(p) * 65536.0);
    return QuantProb{static_cast<std::uint16_t>(std::clamp(q, 1l, 65535l))};
}

double bit_cost(QuantProb q, int bit) {
    const double p = (bit ? q.p16 : 65536 - q.p16) / 65536.0;
    return -std::log(p) * kInvLn2;
}

double rate_estimate(std::span<const QuantProb> probs,
                     std::span<const std::uint8_t> bits) {
    if (probs.size() != bits.size())
        throw ShapeError("rate_estimate: size mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < bits.size(); ++i) sum += bit_cost(probs[i], bits[i]);
    return sum;
}

void RangeEncoder::shift_low() {
    if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
        std::uint8_t temp = cache_;
        do {
            out_.push_back(static_cast<std::uint8_t>(temp + (low_ >> 32)));
            temp = 0xFF;
        } while (--cache_size_ != 0);
        cache_ = static_cast<std::uint8_t>(static_cast<std::uint32_t>(low_) >> 24);
    }
    ++cache_size_;
    low_ = (static_cast<std::uint32_t>(low_) << 8);
}

void RangeEncoder::encode_bit(QuantProb q, int bit) {
    const std::uint32_t r1 = static_cast<std::uint32_t>(
        (static_cast<std::uint64_t>(range_) * q.p16) >> 16);
    if (bit) {
        range_ = r1;
    } else {
        low_ += r1;
        range_ -= r1;
    }
    while (range_ < kTopValue) {
        shift_low();
        range_ <<= 8;
    }
}

void RangeEncoder::encode_span(std::uint32_t cum_lo, std::uint32_t freq) {
    const std::uint32_t r = range_ >> 16;
    low_ += static_cast<std::uint64_t>(r) * cum_lo;
    range_ = r * freq;
    while (range_ < kTopValue) {
        shift_low();
        range_ <<= 8;
    }
}

void RangeEncoder::encode_exp_golomb(std::uint64_t v) {
    const std::uint64_t vp = v + 1;
    const int nb = std::bit_width(vp);
    const QuantProb half{32768};
    for (int i = 0; i < nb - 1; ++i) encode_bit(half, 0);
    for (int i = nb - 1; i >= 0; --i) encode_bit(half, (vp >> i) & 1);
}

std::vector<std::uint8_t> RangeEncoder::finish() {
    for (int i = 0; i < 5; ++i) shift_low();
    return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : buf_(bytes) {
    next_byte();  // leading cache byte emitted by the encoder
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
    if (pos_ >= buf_.size())
        throw DecodeError("range decoder: read past end of payload");
    return buf_[pos_++];
}

int RangeDecoder::decode_bit(QuantProb q) {
    const std::uint32_t r1 = static_cast<std::uint32_t>(
        (static_cast<std::uint64_t>(range_) * q.p16) >> 16);
    int bit;
    if (code_ < r1) {
        bit = 1;
        range_ = r1;
    } else {
        bit = 0;
        code_ -= r1;
        range_ -= r1;
    }
    while (range_ < kTopValue) {
        code_ = (code_ << 8) | next_byte();
        range_ <<= 8;
    }
    return bit;
}

std::uint32_t RangeDecoder::peek_cum() {
    const std::uint32_t r = range_ >> 16;
    const std::uint32_t v = code_ / r;
    return v > 65535 ? 65535 : v;
}

void RangeDecoder::consume_span(std::uint32_t cum_lo, std::uint32_t freq) {
    const std::uint32_t r = range_ >> 16;
    code_ -= r * cum_lo;
    range_ = r * freq;
    while (range_ < kTopValue) {
        code_ = (code_ << 8) | next_byte();
        range_ <<= 8;
    }
}

std::uint64_t RangeDecoder::decode_exp_golomb() {
    const QuantProb half{32768};
    int nz = 0;
    while (decode_bit(half) == 0) {
        if (++nz > 63) throw DecodeError("exp-golomb: prefix too long");
    }
    std::uint64_t vp = 1;
    for (int i = 0; i < nz; ++i) vp = (vp << 1) | decode_bit(half);
    return vp - 1;
}

FactorizedModel::FactorizedModel(int channels, int L) : channels_(channels), L_(L) {
    if (channels < 1 || L < 1)
        throw ShapeError("FactorizedModel: channels and L must be positive");
    logits_.assign(static_cast<std::size_t>(channels) * (2 * L + 1), 0.0f);
}

std::vector<float>& FactorizedModel::logit_grad() {
    if (logit_grad_.size() != logits_.size()) logit_grad_.assign(logits_.size(), 0.0f);
    return logit_grad_;
}

void FactorizedModel::freeze() {
    const int n = table_size();
    freqs_.assign(static_cast<std::size_t>(channels_) * n, 0);
    for (int c = 0; c < channels_; ++c) {
        const float* l = logits_.data() + static_cast<std::size_t>(c) * n;
        double maxv = l[0];
        for (int i = 1; i < n; ++i) maxv = std::max(maxv, static_cast<double>(l[i]));
        std::vector<double> p(n);
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            p[i] = std::exp(static_cast<double>(l[i]) - maxv);
            sum += p[i];
        }
        std::uint16_t* f = freqs_.data() + static_cast<std::size_t>(c) * n;
        std::int64_t total = 0;
        for (int i = 0; i < n; ++i) {
            const long q = std::lround(p[i] / sum * 65536.0);
            f[i] = static_cast<std::uint16_t>(std::clamp(q, 1l, 65535l));
            total += f[i];
        }
        // Deterministic total fix-up toward exactly 65536: spread the delta
        // over the largest bins (never dropping any bin below 1).
        while (total != 65536) {
            int best = 0;
            for (int i = 1; i < n; ++i)
                if (f[i] > f[best]) best = i;
            if (total < 65536) {
                const std::int64_t add =
                    std::min<std::int64_t>(65536 - total, 65535 - f[best]);
                f[best] = static_cast<std::uint16_t>(f[best] + add);
                total += add;
            } else {
                const std::int64_t sub =
                    std::min<std::int64_t>(total - 65536, f[best] - 1);
                if (sub == 0)
                    throw StateError("FactorizedModel::freeze: cannot normalize table");
                f[best] = static_cast<std::uint16_t>(f[best] - sub);
                total -= sub;
            }
        }
    }
    cums_.assign(static_cast<std::size_t>(channels_) * (n + 1), 0);
    for (int c = 0; c < channels_; ++c) {
        std::uint32_t* cu = cums_.data() + static_cast<std::size_t>(c) * (n + 1);
        const std::uint16_t* f = freqs_.data() + static_cast<std::size_t>(c) * n;
        cu[0] = 0;
        for (int i = 0; i < n; ++i) cu[i + 1] = cu[i] + f[i];
    }
    frozen_ = true;
}

std::uint32_t FactorizedModel::freq(int channel, int index) const {
    return freqs_[static_cast<std::size_t>(channel) * table_size() + index];
}

std::uint32_t FactorizedModel::cum(int channel, int index) const {
    return cums_[static_cast<std::size_t>(channel) * (table_size() + 1) + index];
}

double FactorizedModel::symbol_cost_bits(int channel, std::int32_t symbol) const {
    const std::int32_t cs = std::clamp(symbol, -L_, L_);
    double bits = -std::log(freq(channel, cs + L_) / 65536.0) * kInvLn2;
    if (cs == L_ || cs == -L_) {
        const std::uint64_t overflow = static_cast<std::uint64_t>(
            std::abs(static_cast<std::int64_t>(symbol)) - L_);
        bits += 2.0 * std::bit_width(overflow + 1) - 1.0;
    }
    return bits;
}

void FactorizedModel::set_raw_freqs(std::vector<std::uint16_t> freqs) {
    const int n = table_size();
    if (freqs.size() != static_cast<std::size_t>(channels_) * n)
        throw FormatError("FactorizedModel: frequency table size mismatch");
    freqs_ = std::move(freqs);
    cums_.assign(static_cast<std::size_t>(channels_) * (n + 1), 0);
    for (int c = 0; c < channels_; ++c) {
        std::uint32_t* cu = cums_.data() + static_cast<std::size_t>(c) * (n + 1);
        const std::uint16_t* f = freqs_.data() + static_cast<std::size_t>(c) * n;
        cu[0] = 0;
        for (int i = 0; i < n; ++i) {
            if (f[i] == 0) throw FormatError("FactorizedModel: zero-frequency bin");
            cu[i + 1] = cu[i] + f[i];
        }
        if (cu[n] != 65536)
            throw FormatError("FactorizedModel: table mass is not 65536");
    }
    frozen_ = true;
}

void encode_latents(RangeEncoder& coder, std::span<const std::int32_t> symbols,
                    int channels, const FactorizedModel& model) {
    if (!model.frozen()) throw StateError("encode_latents: model is not frozen");
    if (channels != model.channels())
        throw ShapeError("encode_latents: channel count mismatch");
    const int L = model.support_radius();
    for (std::size_t i = 0; i < symbols.size(); ++i) {
        const int c = static_cast<int>(i % channels);
        const std::int32_t s = symbols[i];
        const std::int32_t cs = std::clamp(s, -L, L);
        coder.encode_span(model.cum(c, cs + L), model.freq(c, cs + L));
        if (cs == L || cs == -L)
            coder.encode_exp_golomb(static_cast<std::uint64_t>(
                std::abs(static_cast<std::int64_t>(s)) - L));
    }
}

std::vector<std::int32_t> decode_latents(RangeDecoder& coder, std::size_t rows,
                                         int channels, const FactorizedModel& model) {
    if (!model.frozen()) throw StateError("decode_latents: model is not frozen");
    const int L = model.support_radius();
    const int n = model.table_size();
    std::vector<std::int32_t> out(rows * static_cast<std::size_t>(channels));
    for (std::size_t i = 0; i < out.size(); ++i) {
        const int c = static_cast<int>(i % channels);
        const std::uint32_t v = coder.peek_cum();
        // Linear scan is fine at these table sizes; tables are per channel.
        int idx = 0;
        while (idx + 1 < n && model.cum(c, idx + 1) <= v) ++idx;
        coder.consume_span(model.cum(c, idx), model.freq(c, idx));
        std::int32_t s = idx - L;
        if (s == L || s == -L) {
            const std::uint64_t overflow = coder.decode_exp_golomb();
            const std::int64_t mag = static_cast<std::int64_t>(L) +
                                     static_cast<std::int64_t>(overflow);
            s = static_cast<std::int32_t>(s > 0 ? mag : -mag);
        }
        out[i] = s;
    }
    return out;
}

double latent_cost_bits(std::span<const std::int32_t> symbols, int channels,
                        const FactorizedModel& model) {
    double bits = 0.0;
    for (std::size_t i = 0; i < symbols.size(); ++i)
        bits += model.symbol_cost_bits(static_cast<int>(i % channels), symbols[i]);
    return bits;
}

TracedScalar factorized_rate_bits(Tape* tape, const Traced& noisy_latent,
                                  FactorizedModel& model) {
    const int ch = model.channels();
    if (noisy_latent.value.channels() != ch)
        throw ShapeError("factorized_rate_bits: channel count mismatch");
    const int L = model.support_radius();
    const int n = model.table_size();

    // Per-channel softmax of the logits.
    std::vector<double> probs(static_cast<std::size_t>(ch) * n);
    for (int c = 0; c < ch; ++c) {
        const float* l = model.logits().data() + static_cast<std::size_t>(c) * n;
        double maxv = l[0];
        for (int i = 1; i < n; ++i) maxv = std::max(maxv, static_cast<double>(l[i]));
        double sum = 0.0;
        double* p = probs.data() + static_cast<std::size_t>(c) * n;
        for (int i = 0; i < n; ++i) {
            p[i] = std::exp(static_cast<double>(l[i]) - maxv);
            sum += p[i];
        }
        for (int i = 0; i < n; ++i) p[i] /= sum;
    }

    const auto& x = noisy_latent.value.feats();
    struct Elem {
        int c;
        int k;       // lower bin index (0-based)
        double a;    // interpolation weight toward bin k+1
        double d;    // interpolated density
        bool clamped;
    };
    std::vector<Elem> elems(x.size());
    double bits = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const int c = static_cast<int>(i % ch);
        const double xv = static_cast<double>(x[i]);
        if (!std::isfinite(xv)) {
            // Diverged inputs: an infinite rate with no gradient contribution,
            // so callers can detect the blow-up instead of indexing garbage.
            bits = std::numeric_limits<double>::infinity();
            elems[i] = Elem{c, 0, 0.0, std::numeric_limits<double>::infinity(), true};
            continue;
        }
        const double xc = std::clamp(xv, static_cast<double>(-L), static_cast<double>(L));
        int k = static_cast<int>(std::floor(xc));
        if (k >= L) k = L - 1;
        const double a = xc - k;
        const double* p = probs.data() + static_cast<std::size_t>(c) * n;
        const double d = (1.0 - a) * p[k + L] + a * p[k + L + 1];
        bits += -std::log(d) * kInvLn2;
        elems[i] = Elem{c, k + L, a, d, xv != xc};
    }

    TracedScalar out;
    out.value = bits;
    if (tape) {
        out.grad_id = tape->alloc(1);
        tape->record([elems = std::move(elems), probs = std::move(probs), n, ch,
                      m = &model, in_id = noisy_latent.grad_id,
                      out_id = out.grad_id](Tape& t) {
            const double up = t.grad(out_id)[0];
            auto& gl = m->logit_grad();
            std::vector<double> count(static_cast<std::size_t>(ch), 0.0);
            for (std::size_t i = 0; i < elems.size(); ++i) {
                const Elem& e = elems[i];
                if (!std::isfinite(e.d)) continue;
                const double* p = probs.data() + static_cast<std::size_t>(e.c) * n;
                const double inv_d_ln2 = kInvLn2 / e.d;
                gl[static_cast<std::size_t>(e.c) * n + e.k] -= static_cast<float>(
                    up * (1.0 - e.a) * p[e.k] * inv_d_ln2);
                gl[static_cast<std::size_t>(e.c) * n + e.k + 1] -=
                    static_cast<float>(up * e.a * p[e.k + 1] * inv_d_ln2);
                count[static_cast<std::size_t>(e.c)] += 1.0;
                if (in_id >= 0 && !e.clamped) {
                    t.grad(in_id)[i] += static_cast<float>(
                        -up * (p[e.k + 1] - p[e.k]) * inv_d_ln2);
                }
            }
            // The softmax-normalization term: each element adds +p_j / ln2 to
            // every logit of its channel.
            for (int c = 0; c < ch; ++c) {
                const double* p = probs.data() + static_cast<std::size_t>(c) * n;
                const double w = up * count[static_cast<std::size_t>(c)] * kInvLn2;
                for (int j = 0; j < n; ++j)
                    gl[static_cast<std::size_t>(c) * n + j] +=
                        static_cast<float>(w * p[j]);
            }
        });
    }
    return out;
}

}  // namespace dpcc
