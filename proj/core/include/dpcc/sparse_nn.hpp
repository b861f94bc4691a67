#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpcc/autograd.hpp"
#include "dpcc/sparse_tensor.hpp"

namespace dpcc {

// Weights of one sparse convolution. The weight array is indexed
// [offset][in_channel][out_channel] with offsets enumerated in lexicographic
// (dx,dy,dz) order: for odd K the offsets run over the centered cube
// [-K/2, K/2]^3, for K=2 (resampling layers) over {0,1}^3.
struct ConvKernel {
    int kernel_size = 1;
    int in_channels = 1;
    int out_channels = 1;
    std::vector<float> weights;  // kernel_size^3 * in * out
    std::vector<float> bias;     // out_channels, or empty for bias-free

    std::vector<float> weight_grad;  // sized lazily by backward passes
    std::vector<float> bias_grad;

    static ConvKernel make(int K, int in, int out, bool with_bias = true);

    std::size_t num_offsets() const {
        return static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size;
    }
    std::size_t weight_index(std::size_t off, int ci, int co) const {
        return (off * in_channels + ci) * out_channels + co;
    }
    void ensure_grad();
    void zero_grad();
};

// Generalized sparse convolution evaluated on caller-supplied output
// coordinates: f_u = sum_k W_k f_{u+k} (+ bias), k over the centered offset
// cube, missing neighbors contributing nothing. Output rows with no occupied
// neighbor carry the bias alone. Requires odd kernel_size.
Traced sparse_conv(Tape* tape, const Traced& input, ConvKernel& kernel,
                   std::vector<Coord3> out_coords, int out_bit_depth);

// Stride-2 downsampling convolution (K=2): output coordinates are
// downsample_coords(input), each aggregating its up-to-8 children.
Traced down_conv_s2(Tape* tape, const Traced& input, ConvKernel& kernel);

// Stride-2 transposed convolution (K=2): output coordinates are
// child_candidates(input), child 2u+d receiving W_d f_u (+ bias).
Traced up_conv_s2(Tape* tape, const Traced& input, ConvKernel& kernel);

Traced relu(Tape* tape, const Traced& input);
Traced sigmoid(Tape* tape, const Traced& input);

// Channel-wise concatenation; both inputs must share the exact coordinate set.
Traced concat_channels(Tape* tape, const Traced& a, const Traced& b);

// Elementwise sum of two tensors on the same coordinates and channel count.
Traced add_features(Tape* tape, const Traced& a, const Traced& b);

// Elementwise difference a - b, same shape requirements as add_features.
Traced sub_features(Tape* tape, const Traced& a, const Traced& b);

// Row subset (same channel layout); `rows` are indices into the input in the
// order the output rows should appear.
Traced gather_rows(Tape* tape, const Traced& input, std::vector<std::uint32_t> rows);

// input + noise, identity gradient. Used for training-time latent dithering.
Traced add_constant(Tape* tape, const Traced& input, std::vector<float> noise);

// Inception-ResNet block: three branches (1^3; 1^3->3^3; 1^3->3^3->3^3)
// concatenated back to the block width and added to the input. ReLU between
// convolutions inside a branch, none after the residual add.
struct IrnWeights {
    ConvKernel* b0c0;  // 1^3, w -> w/4
    ConvKernel* b1c0;  // 1^3, w -> w/4
    ConvKernel* b1c1;  // 3^3, w/4 -> w/4
    ConvKernel* b2c0;  // 1^3, w -> w/4
    ConvKernel* b2c1;  // 3^3, w/4 -> w/4
    ConvKernel* b2c2;  // 3^3, w/4 -> w/2
};
Traced irn_forward(Tape* tape, const Traced& input, const IrnWeights& w);

// Binary cross-entropy in bits over 1-channel probabilities, with p clamped to
// [2^-15, 1 - 2^-15] before the logs (matching the coder-side clamp).
TracedScalar bce_loss_bits(Tape* tape, const Traced& probs,
                           std::span<const std::uint8_t> bits);

TracedScalar scalar_add(Tape* tape, const TracedScalar& a, const TracedScalar& b);
TracedScalar scalar_scale(Tape* tape, const TracedScalar& a, double s);

// Sum of every feature entry; mostly for gradient tests.
TracedScalar sum_all(Tape* tape, const Traced& input);

inline constexpr float kProbClampMin = 1.0f / 32768.0f;  // 2^-15

}  // namespace dpcc
