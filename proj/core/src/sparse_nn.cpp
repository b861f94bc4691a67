#include "dpcc/sparse_nn.hpp"

#include <array>
#include <cmath>
#include <cstring>

namespace dpcc {

namespace {

std::vector<std::array<int, 3>> centered_offsets(int K) {
    const int r = K / 2;
    std::vector<std::array<int, 3>> offs;
    offs.reserve(static_cast<std::size_t>(K) * K * K);
    for (int dx = -r; dx <= r; ++dx)
        for (int dy = -r; dy <= r; ++dy)
            for (int dz = -r; dz <= r; ++dz) offs.push_back({dx, dy, dz});
    return offs;
}

bool neighbor_key(const Coord3& u, const std::array<int, 3>& off, MortonKey* key) {
    const std::int64_t nx = static_cast<std::int64_t>(u.x) + off[0];
    const std::int64_t ny = static_cast<std::int64_t>(u.y) + off[1];
    const std::int64_t nz = static_cast<std::int64_t>(u.z) + off[2];
    if ((nx | ny | nz) < 0 || nx >= 65536 || ny >= 65536 || nz >= 65536)
        return false;
    *key = morton_encode(Coord3{static_cast<std::uint32_t>(nx),
                                static_cast<std::uint32_t>(ny),
                                static_cast<std::uint32_t>(nz)});
    return true;
}

SparseTensor3 conv_value(const SparseTensor3& in, const ConvKernel& k,
                         std::span<const Coord3> out_coords, int out_bit_depth) {
    const auto offs = centered_offsets(k.kernel_size);
    const MortonMap map(in.coords());
    const int ci_n = k.in_channels, co_n = k.out_channels;
    std::vector<float> out(out_coords.size() * static_cast<std::size_t>(co_n), 0.0f);
    const float* fin = in.feats().data();

    for (std::size_t r = 0; r < out_coords.size(); ++r) {
        float* acc = out.data() + r * co_n;
        if (!k.bias.empty()) std::memcpy(acc, k.bias.data(), sizeof(float) * co_n);
        for (std::size_t o = 0; o < offs.size(); ++o) {
            MortonKey key;
            if (!neighbor_key(out_coords[r], offs[o], &key)) continue;
            const std::int64_t j = map.find(key);
            if (j < 0) continue;
            const float* f = fin + static_cast<std::size_t>(j) * ci_n;
            const float* w = k.weights.data() + k.weight_index(o, 0, 0);
            for (int ci = 0; ci < ci_n; ++ci) {
                const float fv = f[ci];
                const float* wr = w + static_cast<std::size_t>(ci) * co_n;
                for (int co = 0; co < co_n; ++co) acc[co] += wr[co] * fv;
            }
        }
    }
    return SparseTensor3::from_sorted(
        std::vector<Coord3>(out_coords.begin(), out_coords.end()), std::move(out),
        co_n, out_bit_depth);
}

void conv_backward(const SparseTensor3& in, ConvKernel& k,
                   std::span<const Coord3> out_coords,
                   const std::vector<float>& grad_out, std::vector<float>* grad_in) {
    const auto offs = centered_offsets(k.kernel_size);
    const MortonMap map(in.coords());
    const int ci_n = k.in_channels, co_n = k.out_channels;
    k.ensure_grad();
    const float* fin = in.feats().data();

    for (std::size_t r = 0; r < out_coords.size(); ++r) {
        const float* go = grad_out.data() + r * co_n;
        if (!k.bias.empty())
            for (int co = 0; co < co_n; ++co) k.bias_grad[co] += go[co];
        for (std::size_t o = 0; o < offs.size(); ++o) {
            MortonKey key;
            if (!neighbor_key(out_coords[r], offs[o], &key)) continue;
            const std::int64_t j = map.find(key);
            if (j < 0) continue;
            const float* f = fin + static_cast<std::size_t>(j) * ci_n;
            float* gw = k.weight_grad.data() + k.weight_index(o, 0, 0);
            float* gi = grad_in ? grad_in->data() + static_cast<std::size_t>(j) * ci_n
                                : nullptr;
            const float* w = k.weights.data() + k.weight_index(o, 0, 0);
            for (int ci = 0; ci < ci_n; ++ci) {
                const float fv = f[ci];
                float acc_gi = 0.0f;
                const std::size_t base = static_cast<std::size_t>(ci) * co_n;
                for (int co = 0; co < co_n; ++co) {
                    gw[base + co] += fv * go[co];
                    acc_gi += w[base + co] * go[co];
                }
                if (gi) gi[ci] += acc_gi;
            }
        }
    }
}

void check_in_channels(const Traced& input, const ConvKernel& k, const char* who) {
    if (input.value.channels() != k.in_channels)
        throw ShapeError(std::string(who) + ": input channel count mismatch");
}

}  // namespace

ConvKernel ConvKernel::make(int K, int in, int out, bool with_bias) {
    ConvKernel k;
    k.kernel_size = K;
    k.in_channels = in;
    k.out_channels = out;
    k.weights.assign(k.num_offsets() * in * out, 0.0f);
    if (with_bias) k.bias.assign(static_cast<std::size_t>(out), 0.0f);
    return k;
}

void ConvKernel::ensure_grad() {
    if (weight_grad.size() != weights.size()) weight_grad.assign(weights.size(), 0.0f);
    if (bias_grad.size() != bias.size()) bias_grad.assign(bias.size(), 0.0f);
}

void ConvKernel::zero_grad() {
    weight_grad.assign(weights.size(), 0.0f);
    bias_grad.assign(bias.size(), 0.0f);
}

Traced sparse_conv(Tape* tape, const Traced& input, ConvKernel& kernel,
                   std::vector<Coord3> out_coords, int out_bit_depth) {
    if (kernel.kernel_size % 2 == 0)
        throw ShapeError("sparse_conv: kernel size must be odd (use the s2 layers)");
    check_in_channels(input, kernel, "sparse_conv");

    Traced out;
    out.value = conv_value(input.value, kernel, out_coords, out_bit_depth);
    if (tape) {
        out.grad_id = tape->alloc(out.value.feats().size());
        tape->record([in = input.value, in_id = input.grad_id, k = &kernel,
                      coords = out.value.coords(), out_id = out.grad_id](Tape& t) {
            std::vector<float>* gi = in_id >= 0 ? &t.grad(in_id) : nullptr;
            conv_backward(in, *k, coords, t.grad(out_id), gi);
        });
    }
    return out;
}

Traced down_conv_s2(Tape* tape, const Traced& input, ConvKernel& kernel) {
    if (kernel.kernel_size != 2) throw ShapeError("down_conv_s2: kernel size must be 2");
    check_in_channels(input, kernel, "down_conv_s2");
    const SparseTensor3& in = input.value;
    const int ci_n = kernel.in_channels, co_n = kernel.out_channels;

    std::vector<Coord3> out_coords = downsample_coords(in.coords());
    const MortonMap map(in.coords());
    std::vector<float> feats(out_coords.size() * static_cast<std::size_t>(co_n), 0.0f);
    for (std::size_t r = 0; r < out_coords.size(); ++r) {
        float* acc = feats.data() + r * co_n;
        if (!kernel.bias.empty())
            std::memcpy(acc, kernel.bias.data(), sizeof(float) * co_n);
        const Coord3& u = out_coords[r];
        for (std::uint32_t d = 0; d < 8; ++d) {
            const Coord3 child{(u.x << 1) + ((d >> 2) & 1u), (u.y << 1) + ((d >> 1) & 1u),
                               (u.z << 1) + (d & 1u)};
            const std::int64_t j = map.find(morton_encode(child));
            if (j < 0) continue;
            const float* f = in.feats().data() + static_cast<std::size_t>(j) * ci_n;
            const float* w = kernel.weights.data() + kernel.weight_index(d, 0, 0);
            for (int ci = 0; ci < ci_n; ++ci)
                for (int co = 0; co < co_n; ++co)
                    acc[co] += w[static_cast<std::size_t>(ci) * co_n + co] * f[ci];
        }
    }

    Traced out;
    out.value = SparseTensor3::from_sorted(std::move(out_coords), std::move(feats),
                                           co_n, in.bit_depth() - 1);
    if (tape) {
        out.grad_id = tape->alloc(out.value.feats().size());
        tape->record([in_copy = in, in_id = input.grad_id, k = &kernel,
                      coords = out.value.coords(), out_id = out.grad_id](Tape& t) {
            const int ci_n = k->in_channels, co_n = k->out_channels;
            k->ensure_grad();
            const MortonMap map(in_copy.coords());
            const std::vector<float>& go_all = t.grad(out_id);
            std::vector<float>* gi =
                in_id >= 0 ? &t.grad(in_id) : nullptr;
            for (std::size_t r = 0; r < coords.size(); ++r) {
                const float* go = go_all.data() + r * co_n;
                if (!k->bias.empty())
                    for (int co = 0; co < co_n; ++co) k->bias_grad[co] += go[co];
                const Coord3& u = coords[r];
                for (std::uint32_t d = 0; d < 8; ++d) {
                    const Coord3 child{(u.x << 1) + ((d >> 2) & 1u),
                                       (u.y << 1) + ((d >> 1) & 1u),
                                       (u.z << 1) + (d & 1u)};
                    const std::int64_t j = map.find(morton_encode(child));
                    if (j < 0) continue;
                    const float* f =
                        in_copy.feats().data() + static_cast<std::size_t>(j) * ci_n;
                    for (int ci = 0; ci < ci_n; ++ci) {
                        float acc_gi = 0.0f;
                        for (int co = 0; co < co_n; ++co) {
                            k->weight_grad[k->weight_index(d, ci, co)] +=
                                f[ci] * go[co];
                            acc_gi += k->weights[k->weight_index(d, ci, co)] * go[co];
                        }
                        if (gi)
                            (*gi)[static_cast<std::size_t>(j) * ci_n + ci] += acc_gi;
                    }
                }
            }
        });
    }
    return out;
}

Traced up_conv_s2(Tape* tape, const Traced& input, ConvKernel& kernel) {
    if (kernel.kernel_size != 2) throw ShapeError("up_conv_s2: kernel size must be 2");
    check_in_channels(input, kernel, "up_conv_s2");
    const SparseTensor3& in = input.value;
    const int ci_n = kernel.in_channels, co_n = kernel.out_channels;

    std::vector<Coord3> out_coords = child_candidates(in.coords());
    std::vector<float> feats(out_coords.size() * static_cast<std::size_t>(co_n), 0.0f);
    for (std::size_t j = 0; j < in.size(); ++j) {
        const float* f = in.feats().data() + j * ci_n;
        for (std::uint32_t d = 0; d < 8; ++d) {
            float* acc = feats.data() + (j * 8 + d) * co_n;
            if (!kernel.bias.empty())
                std::memcpy(acc, kernel.bias.data(), sizeof(float) * co_n);
            const float* w = kernel.weights.data() + kernel.weight_index(d, 0, 0);
            for (int ci = 0; ci < ci_n; ++ci)
                for (int co = 0; co < co_n; ++co)
                    acc[co] += w[static_cast<std::size_t>(ci) * co_n + co] * f[ci];
        }
    }

    Traced out;
    out.value = SparseTensor3::from_sorted(std::move(out_coords), std::move(feats),
                                           co_n, in.bit_depth() + 1);
    if (tape) {
        out.grad_id = tape->alloc(out.value.feats().size());
        tape->record([in_copy = in, in_id = input.grad_id, k = &kernel,
                      out_id = out.grad_id](Tape& t) {
            const int ci_n = k->in_channels, co_n = k->out_channels;
            k->ensure_grad();
            const std::vector<float>& go_all = t.grad(out_id);
            std::vector<float>* gi = in_id >= 0 ? &t.grad(in_id) : nullptr;
            for (std::size_t j = 0; j < in_copy.size(); ++j) {
                const float* f = in_copy.feats().data() + j * ci_n;
                for (std::uint32_t d = 0; d < 8; ++d) {
                    const float* go = go_all.data() + (j * 8 + d) * co_n;
                    if (!k->bias.empty())
                        for (int co = 0; co < co_n; ++co) k->bias_grad[co] += go[co];
                    for (int ci = 0; ci < ci_n; ++ci) {
                        float acc_gi = 0.0f;
                        for (int co = 0; co < co_n; ++co) {
                            k->weight_grad[k->weight_index(d, ci, co)] +=
                                f[ci] * go[co];
                            acc_gi += k->weights[k->weight_index(d, ci, co)] * go[co];
                        }
                        if (gi) (*gi)[j * ci_n + ci] += acc_gi;
                    }
                }
            }
        });
    }
    return out;
}

Traced relu(Tape* tape, const Traced& input) {
    Traced out;
    out.value = input.value;
    for (float& v : out.value.feats())
        if (v < 0.0f) v = 0.0f;
    if (tape && input.grad_id >= 0) {
        out.grad_id = tape->alloc(out.value.feats().size());
        tape->record([vals = input.value.feats(), in_id = input.grad_id,
                      out_id = out.grad_id](Tape& t) {
            const auto& go = t.grad(out_id);
            auto& gi = t.grad(in_id);
            for (std::size_t i = 0; i < vals.size(); ++i)
                if (vals[i] > 0.0f) gi[i] += go[i];
        });
    }
    return out;
}

Traced sigmoid(Tape* tape, const Traced& input) {
    Traced out;
    out.value = input.value;
    for (float& v : out.value.feats()) v = 1.0f / (1.0f + std::exp(-v));
    if (tape && input.grad_id >= 0) {
        out.grad_id = tape->alloc(out.value.feats().size());
        tape->record([vals = out.value.feats(), in_id = input.grad_id,
                      out_id = out.grad_id](Tape& t) {
            const auto& go = t.grad(out_id);
            auto& gi = t.grad(in_id);
            for (std::size_t i = 0; i < vals.size(); ++i)
                gi[i] += go[i] * vals[i] * (1.0f - vals[i]);
        });
    }
    return out;
}

Traced concat_channels(Tape* tape, const Traced& a, const Traced& b) {
    if (a.value.coords() != b.value.coords())
        throw ShapeError("concat_channels: coordinate sets differ");
    const int ca = a.value.channels(), cb = b.value.channels();
    const std::size_t n = a.value.size();
    std::vector<float> feats(n * static_cast<std::size_t>(ca + cb));
    for (std::size_t i = 0; i < n; ++i) {
        std::memcpy(feats.data() + i * (ca + cb), a.value.feats().data() + i * ca,
                    sizeof(float) * ca);
        std::memcpy(feats.data() + i * (ca + cb) + ca, b.value.feats().data() + i * cb,
                    sizeof(float) * cb);
    }
    Traced out;
    out.value = SparseTensor3::from_sorted(a.value.coords(), std::move(feats), ca + cb,
                                           a.value.bit_depth());
    if (tape && (a.grad_id >= 0 || b.grad_id >= 0)) {
        out.grad_id = tape->alloc(out.value.feats().size());
        tape->record([n, ca, cb, a_id = a.grad_id, b_id = b.grad_id,
                      out_id = out.grad_id](Tape& t) {
            const auto& go = t.grad(out_id);
            for (std::size_t i = 0; i < n; ++i) {
                if (a_id >= 0) {
                    auto& ga = t.grad(a_id);
                    for (int c = 0; c < ca; ++c)
                        ga[i * ca + c] += go[i * (ca + cb) + c];
                }
                if (b_id >= 0) {
                    auto& gb = t.grad(b_id);
                    for (int c = 0; c < cb; ++c)
                        gb[i * cb + c] += go[i * (ca + cb) + ca + c];
                }
            }
        });
    }
    return out;
}

Traced add_features(Tape* tape, const Traced& a, const Traced& b) {
    if (a.value.coords() != b.value.coords() ||
        a.value.channels() != b.value.channels())
        throw ShapeError("add_features: shape mismatch");
    Traced out;
    out.value = a.value;
    const auto& fb = b.value.feats();
    auto& fo = out.value.feats();
    for (std::size_t i = 0; i < fo.size(); ++i) fo[i] += fb[i];
    if (tape && (a.grad_id >= 0 || b.grad_id >= 0)) {
        out.grad_id = tape->alloc(fo.size());
        tape->record([a_id = a.grad_id, b_id = b.grad_id, out_id = out.grad_id](Tape& t) {
            const auto& go = t.grad(out_id);
            if (a_id >= 0) {
                auto& ga = t.grad(a_id);
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b_id >= 0) {
                auto& gb = t.grad(b_id);
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

Traced sub_features(Tape* tape, const Traced& a, const Traced& b) {
    if (a.value.coords() != b.value.coords() ||
        a.value.channels() != b.value.channels())
        throw ShapeError("sub_features: shape mismatch");
    Traced out;
    out.value = a.value;
    const auto& fb = b.value.feats();
    auto& fo = out.value.feats();
    for (std::size_t i = 0; i < fo.size(); ++i) fo[i] -= fb[i];
    if (tape && (a.grad_id >= 0 || b.grad_id >= 0)) {
        out.grad_id = tape->alloc(fo.size());
        tape->record([a_id = a.grad_id, b_id = b.grad_id, out_id = out.grad_id](Tape& t) {
            const auto& go = t.grad(out_id);
            if (a_id >= 0) {
                auto& ga = t.grad(a_id);
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b_id >= 0) {
                auto& gb = t.grad(b_id);
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

Traced gather_rows(Tape* tape, const Traced& input, std::vector<std::uint32_t> rows) {
    const int c = input.value.channels();
    std::vector<Coord3> coords(rows.size());
    std::vector<float> feats(rows.size() * static_cast<std::size_t>(c));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        coords[i] = input.value.coords()[rows[i]];
        std::memcpy(feats.data() + i * c,
                    input.value.feats().data() + static_cast<std::size_t>(rows[i]) * c,
                    sizeof(float) * c);
    }
    Traced out;
    out.value = SparseTensor3::from_sorted(std::move(coords), std::move(feats), c,
                                           input.value.bit_depth());
    if (tape && input.grad_id >= 0) {
        out.grad_id = tape->alloc(out.value.feats().size());
        tape->record([rows = std::move(rows), c, in_id = input.grad_id,
                      out_id = out.grad_id](Tape& t) {
            const auto& go = t.grad(out_id);
            auto& gi = t.grad(in_id);
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (int ch = 0; ch < c; ++ch)
                    gi[static_cast<std::size_t>(rows[i]) * c + ch] += go[i * c + ch];
        });
    }
    return out;
}

Traced add_constant(Tape* tape, const Traced& input, std::vector<float> noise) {
    if (noise.size() != input.value.feats().size())
        throw ShapeError("add_constant: size mismatch");
    Traced out;
    out.value = input.value;
    auto& f = out.value.feats();
    for (std::size_t i = 0; i < f.size(); ++i) f[i] += noise[i];
    if (tape && input.grad_id >= 0) {
        out.grad_id = tape->alloc(f.size());
        tape->record([in_id = input.grad_id, out_id = out.grad_id](Tape& t) {
            const auto& go = t.grad(out_id);
            auto& gi = t.grad(in_id);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        });
    }
    return out;
}

Traced irn_forward(Tape* tape, const Traced& input, const IrnWeights& w) {
    const int width = input.value.channels();
    if (w.b0c0->in_channels != width)
        throw ShapeError("irn_forward: block width mismatch");
    const std::vector<Coord3>& coords = input.value.coords();
    const int bd = input.value.bit_depth();

    Traced b0 = sparse_conv(tape, input, *w.b0c0, coords, bd);

    Traced b1 = sparse_conv(tape, input, *w.b1c0, coords, bd);
    b1 = relu(tape, b1);
    b1 = sparse_conv(tape, b1, *w.b1c1, coords, bd);

    Traced b2 = sparse_conv(tape, input, *w.b2c0, coords, bd);
    b2 = relu(tape, b2);
    b2 = sparse_conv(tape, b2, *w.b2c1, coords, bd);
    b2 = relu(tape, b2);
    b2 = sparse_conv(tape, b2, *w.b2c2, coords, bd);

    Traced cat = concat_channels(tape, concat_channels(tape, b0, b1), b2);
    if (cat.value.channels() != width)
        throw ShapeError("irn_forward: branch widths do not sum to block width");
    return add_features(tape, input, cat);
}

TracedScalar bce_loss_bits(Tape* tape, const Traced& probs,
                           std::span<const std::uint8_t> bits) {
    if (probs.value.channels() != 1)
        throw ShapeError("bce_loss_bits: expected 1-channel probabilities");
    if (probs.value.size() != bits.size())
        throw ShapeError("bce_loss_bits: bit count mismatch");
    constexpr double inv_ln2 = 1.4426950408889634;
    const auto& p = probs.value.feats();
    double sum = 0.0;
    for (std::size_t i = 0; i < bits.size(); ++i) {
        const double pc =
            std::min(std::max(static_cast<double>(p[i]),
                              static_cast<double>(kProbClampMin)),
                     1.0 - static_cast<double>(kProbClampMin));
        sum -= (bits[i] ? std::log(pc) : std::log(1.0 - pc)) * inv_ln2;
    }
    TracedScalar out;
    out.value = sum;
    if (tape && probs.grad_id >= 0) {
        out.grad_id = tape->alloc(1);
        tape->record([vals = probs.value.feats(),
                      b = std::vector<std::uint8_t>(bits.begin(), bits.end()),
                      in_id = probs.grad_id, out_id = out.grad_id](Tape& t) {
            const float up = t.grad(out_id)[0];
            auto& gi = t.grad(in_id);
            for (std::size_t i = 0; i < b.size(); ++i) {
                const float pv = vals[i];
                if (pv <= kProbClampMin || pv >= 1.0f - kProbClampMin) continue;
                const float g = b[i] ? -1.0f / pv : 1.0f / (1.0f - pv);
                gi[i] += up * g * static_cast<float>(inv_ln2);
            }
        });
    }
    return out;
}

TracedScalar scalar_add(Tape* tape, const TracedScalar& a, const TracedScalar& b) {
    TracedScalar out;
    out.value = a.value + b.value;
    if (tape && (a.grad_id >= 0 || b.grad_id >= 0)) {
        out.grad_id = tape->alloc(1);
        tape->record([a_id = a.grad_id, b_id = b.grad_id, out_id = out.grad_id](Tape& t) {
            const float up = t.grad(out_id)[0];
            if (a_id >= 0) t.grad(a_id)[0] += up;
            if (b_id >= 0) t.grad(b_id)[0] += up;
        });
    }
    return out;
}

TracedScalar scalar_scale(Tape* tape, const TracedScalar& a, double s) {
    TracedScalar out;
    out.value = a.value * s;
    if (tape && a.grad_id >= 0) {
        out.grad_id = tape->alloc(1);
        tape->record([a_id = a.grad_id, s, out_id = out.grad_id](Tape& t) {
            t.grad(a_id)[0] += t.grad(out_id)[0] * static_cast<float>(s);
        });
    }
    return out;
}

TracedScalar sum_all(Tape* tape, const Traced& input) {
    TracedScalar out;
    double sum = 0.0;
    for (float v : input.value.feats()) sum += v;
    out.value = sum;
    if (tape && input.grad_id >= 0) {
        out.grad_id = tape->alloc(1);
        tape->record([n = input.value.feats().size(), in_id = input.grad_id,
                      out_id = out.grad_id](Tape& t) {
            const float up = t.grad(out_id)[0];
            auto& gi = t.grad(in_id);
            for (std::size_t i = 0; i < n; ++i) gi[i] += up;
        });
    }
    return out;
}

}  // namespace dpcc
