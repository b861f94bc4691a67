#pragma once

#include "dpcc/sopa.hpp"

namespace dpcc {

// Desk-scale training setup: short synthetic sequences, small widths, a few
// hundred steps at most. Parsed from a key=value file (# comments allowed);
// unknown keys are errors.
struct TrainConfig {
    int width = 8;
    int bit_depth = 6;
    int lossless_scales = 3;  // m: scales coded losslessly in lossy mode
    int steps = 30;
    float lr = 1e-3f;
    float rate_weight = 1.0f;  // lambda on the latent rate terms
    std::uint64_t seed = 1;
    bool train_lossy = true;
    bool train_residual = true;
    int latent_support = 32;

    void validate() const;
    static TrainConfig from_file(const std::string& path);
};

struct TrainResult {
    std::vector<double> loss_history;  // total loss per step, in bits
};

// Synthetic translating/rotating voxel shells. Deterministic in (seed,
// frames, bit_depth).
std::vector<SparseTensor3> toy_sequence(std::uint64_t seed, int frames,
                                        int bit_depth);

// Fresh seeded model trained on toy sequences; bit-deterministic under the
// config seed. Throws TrainingError (with the step index) if the loss leaves
// the finite range. The entropy model is frozen on return.
Model train_toy(const TrainConfig& cfg, TrainResult* result = nullptr);

// One Adam step over every kernel weight/bias gradient and the entropy
// logits, then gradient reset. Exposed for custom loops and tests.
class AdamOptimizer {
  public:
    explicit AdamOptimizer(float lr) : lr_(lr) {}

    void step(Model& model);

  private:
    struct Slot {
        std::vector<float> m, v;
    };
    void update(const std::string& key, std::vector<float>& param,
                std::vector<float>& grad);

    float lr_;
    float beta1_ = 0.9f, beta2_ = 0.999f, eps_ = 1e-8f;
    std::uint64_t t_ = 0;
    std::map<std::string, Slot> slots_;
};

}  // namespace dpcc
