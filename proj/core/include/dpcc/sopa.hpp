#pragma once

#include <functional>
#include <optional>

#include "dpcc/weights.hpp"

namespace dpcc {

// Multiscale temporal prior: per-scale features extracted from the previous
// frame's reconstruction, scales top_scale-1 down to lowest_scale.
struct FrameContext {
    int top_scale = 0;
    int lowest_scale = 0;
    std::vector<SparseTensor3> scales;  // index s - lowest_scale

    const SparseTensor3& at(int scale) const {
        if (scale < lowest_scale || scale >= top_scale)
            throw ShapeError("FrameContext: scale out of range");
        return scales[static_cast<std::size_t>(scale - lowest_scale)];
    }
};

// Spatial and temporal priors aligned on the SAME coordinate set at one
// scale. In intra mode the temporal tensor is all zeros rather than absent, so
// one network serves both modes.
struct PriorBundle {
    Traced spatial;
    Traced temporal;
    int scale = 0;
};

struct OccupancyPrediction {
    std::vector<Coord3> coords;
    std::vector<float> probs;  // clamped into [2^-15, 1 - 2^-15]
};

inline float clamp_prob(float p) {
    return std::min(std::max(p, kProbClampMin), 1.0f - kProbClampMin);
}

// Owns the weight set and exposes the network building blocks. All forward
// entry points accept a nullable Tape; inference passes nullptr.
class Model {
  public:
    explicit Model(ModelWeights w);

    // Fresh seeded He-uniform initialization of the full layer zoo.
    static Model init(int width, std::uint64_t seed, int latent_support = 32);

    int width() const { return weights_.width; }
    ModelWeights& weights() { return weights_; }
    const ModelWeights& weights() const { return weights_; }
    FactorizedModel& entropy() { return weights_.entropy; }

    ConvKernel& kernel(const std::string& path);
    IrnWeights irn(const std::string& prefix);

    // Occupancy (all-ones 1 channel) lifted to the working width, K=3.
    Traced lift_spatial(Tape* tape, std::vector<Coord3> coords, int bit_depth);

    // Constant all-zero temporal prior for intra coding.
    Traced zero_temporal(std::vector<Coord3> coords, int bit_depth) const;

    // Extractor pyramid over the reference reconstruction.
    FrameContext extract_pyramid(const SparseTensor3& recon, int lowest_scale);
    std::vector<Traced> extract_pyramid_traced(Tape* tape, const SparseTensor3& recon,
                                               int lowest_scale);

    // One K=9 convolution on target coordinates (the Predictor).
    Traced predictor_transfer(Tape* tape, const Traced& ref_feats,
                              std::vector<Coord3> target_coords, int bit_depth);

    // Latent produced by `steps` Encoder downscaling steps from geometry.
    Traced encode_latent(Tape* tape, const SparseTensor3& geometry, int steps);

    // Transfers latent features onto an arbitrary same-scale coordinate set.
    Traced carry_latent(Tape* tape, const Traced& latent,
                        std::vector<Coord3> target_coords, int bit_depth);

    // Doubles every coordinate (features unchanged), lifting a tensor one
    // scale up so carry_latent can cross a scale boundary.
    static Traced upscale_coords(Tape* tape, const Traced& t);

    // Shared SOPA trunk: fuse conv, IRN stack, stride-2 upsampling, IRN stack.
    // Returns width-channel features on the child candidates of the bundle
    // coordinates.
    Traced sopa_backbone(Tape* tape, const std::string& prefix, const Traced& fused);
    Traced sopa_head(Tape* tape, const std::string& prefix, const Traced& feats);

    // Decided same-scale occupancy lifted for stage conditioning (K=3 over
    // the union of decided-occupied coordinates, evaluated on the stage's
    // candidates).
    Traced stage_condition(Tape* tape, const std::vector<Coord3>& decided,
                           std::vector<Coord3> stage_coords, int bit_depth);

  private:
    void validate() const;
    ModelWeights weights_;
};

// 1-stage SOPA over a (spatial, temporal, latent) bundle; latent may be null
// for the lossless-style variant. Probabilities cover all 8*|coords|
// candidates.
OccupancyPrediction sopa_1stage(Model& m, Tape* tape, const PriorBundle& bundle,
                                const Traced* latent, Traced* traced_probs_out);

// Per-stage callback: given the stage id, its candidate coordinates and their
// predicted (clamped) probabilities, returns the occupancy bit of every
// candidate — ground truth while encoding, decoded bits while decoding.
using StageBits = std::function<std::vector<std::uint8_t>(
    int stage, std::span<const Coord3> coords, std::span<const float> probs)>;

// 8-stage SOPA: candidates are split into octant-parity groups processed in
// fixed order 0..7, each conditioned on the occupancy decided by earlier
// stages. Returns the Morton-sorted occupied child coordinates. When tape and
// bce_out are given, also accumulates the BCE of all stages.
std::vector<Coord3> sopa_8stage(Model& m, Tape* tape, const PriorBundle& bundle,
                                const StageBits& callback,
                                TracedScalar* bce_out = nullptr);

}  // namespace dpcc
