#include "dpcc/sopa.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace dpcc {

namespace {

struct PathSpec {
    const char* path;
    int K;
    int in_mult;   // channels as multiples of width/4 (so w = 4 units)
    int out_mult;  // ditto; 0 encodes "literal 1 channel"
};

// Channel units: 4 units = width, 1 unit = width/4, 0 = literally one channel.
const PathSpec kIrnSpec[] = {
    {".b0c0", 1, 4, 1}, {".b1c0", 1, 4, 1}, {".b1c1", 3, 1, 1},
    {".b2c0", 1, 4, 1}, {".b2c1", 3, 1, 1}, {".b2c2", 3, 1, 2},
};

void append_irn(std::vector<std::pair<std::string, PathSpec>>& out,
                const std::string& prefix) {
    for (const PathSpec& s : kIrnSpec)
        out.emplace_back(prefix + s.path, PathSpec{"", s.K, s.in_mult, s.out_mult});
}

std::vector<std::pair<std::string, PathSpec>> layer_inventory() {
    std::vector<std::pair<std::string, PathSpec>> out;
    auto add = [&](const std::string& p, int K, int in_mult, int out_mult) {
        out.emplace_back(p, PathSpec{"", K, in_mult, out_mult});
    };
    add("spatial.lift", 3, 0, 4);
    add("extractor.lift", 3, 0, 4);
    add("extractor.down", 2, 4, 4);
    for (int i = 0; i < 3; ++i) append_irn(out, "extractor.irn" + std::to_string(i));
    add("predictor", 9, 4, 4);
    add("sopa8.fuse", 3, 8, 4);
    for (int i = 0; i < 3; ++i) append_irn(out, "sopa8.pre.irn" + std::to_string(i));
    add("sopa8.up", 2, 4, 4);
    for (int i = 0; i < 3; ++i) append_irn(out, "sopa8.post.irn" + std::to_string(i));
    add("sopa8.cond", 3, 0, 4);
    add("sopa8.head", 1, 4, 0);
    add("sopa1.fuse", 3, 12, 4);
    for (int i = 0; i < 3; ++i) append_irn(out, "sopa1.pre.irn" + std::to_string(i));
    add("sopa1.up", 2, 4, 4);
    for (int i = 0; i < 3; ++i) append_irn(out, "sopa1.post.irn" + std::to_string(i));
    add("sopa1.head", 1, 4, 0);
    add("encoder.lift", 3, 0, 4);
    add("encoder.down", 2, 4, 4);
    for (int i = 0; i < 3; ++i) append_irn(out, "encoder.irn" + std::to_string(i));
    add("encoder.out", 3, 4, 4);
    add("lossy.carry", 3, 4, 4);
    add("residual.pred", 9, 4, 4);
    return out;
}

int units_to_channels(int mult, int width) {
    return mult == 0 ? 1 : mult * (width / 4);
}

}  // namespace

Model::Model(ModelWeights w) : weights_(std::move(w)) { validate(); }

void Model::validate() const {
    if (weights_.width < 4 || weights_.width % 4 != 0)
        throw FormatError("Model: width must be a positive multiple of 4");
    for (const auto& [path, spec] : layer_inventory()) {
        auto it = weights_.kernels.find(path);
        if (it == weights_.kernels.end())
            throw FormatError("Model: missing layer path '" + path + "'");
        const ConvKernel& k = it->second;
        if (k.kernel_size != spec.K ||
            k.in_channels != units_to_channels(spec.in_mult, weights_.width) ||
            k.out_channels != units_to_channels(spec.out_mult, weights_.width))
            throw FormatError("Model: layer '" + path + "' has unexpected shape");
        if (k.weights.size() != k.num_offsets() * k.in_channels * k.out_channels)
            throw FormatError("Model: layer '" + path + "' weight array size mismatch");
    }
    if (!weights_.has_entropy)
        throw FormatError("Model: entropy model tables are missing");
}

Model Model::init(int width, std::uint64_t seed, int latent_support) {
    ModelWeights w;
    w.width = width;
    for (const auto& [path, spec] : layer_inventory()) {
        w.kernels.emplace(path,
                          ConvKernel::make(spec.K, units_to_channels(spec.in_mult, width),
                                           units_to_channels(spec.out_mult, width)));
    }
    std::mt19937_64 rng(seed);
    for (auto& [path, k] : w.kernels) {
        const float fan_in =
            static_cast<float>(k.num_offsets() * static_cast<std::size_t>(k.in_channels));
        const float bound = std::sqrt(6.0f / fan_in);
        std::uniform_real_distribution<float> dist(-bound, bound);
        for (float& v : k.weights) v = dist(rng);
    }
    w.entropy = FactorizedModel(width, latent_support);
    for (int c = 0; c < width; ++c)
        for (int i = 0; i <= 2 * latent_support; ++i)
            w.entropy.logits()[static_cast<std::size_t>(c) * (2 * latent_support + 1) + i] =
                -0.3f * static_cast<float>(std::abs(i - latent_support));
    w.entropy.freeze();
    w.has_entropy = true;
    return Model(std::move(w));
}

ConvKernel& Model::kernel(const std::string& path) {
    auto it = weights_.kernels.find(path);
    if (it == weights_.kernels.end())
        throw FormatError("Model: missing layer path '" + path + "'");
    return it->second;
}

IrnWeights Model::irn(const std::string& prefix) {
    return IrnWeights{&kernel(prefix + ".b0c0"), &kernel(prefix + ".b1c0"),
                      &kernel(prefix + ".b1c1"), &kernel(prefix + ".b2c0"),
                      &kernel(prefix + ".b2c1"), &kernel(prefix + ".b2c2")};
}

Traced Model::lift_spatial(Tape* tape, std::vector<Coord3> coords, int bit_depth) {
    Traced occ = constant(make_occupancy(coords, bit_depth));
    return sparse_conv(tape, occ, kernel("spatial.lift"), std::move(coords), bit_depth);
}

Traced Model::zero_temporal(std::vector<Coord3> coords, int bit_depth) const {
    std::vector<float> zeros(coords.size() * static_cast<std::size_t>(weights_.width),
                             0.0f);
    return constant(SparseTensor3::from_sorted(std::move(coords), std::move(zeros),
                                               weights_.width, bit_depth));
}

std::vector<Traced> Model::extract_pyramid_traced(Tape* tape,
                                                  const SparseTensor3& recon,
                                                  int lowest_scale) {
    const int top = recon.bit_depth();
    std::vector<Traced> scales(static_cast<std::size_t>(std::max(0, top - lowest_scale)));
    if (recon.empty()) {
        for (int s = top - 1; s >= lowest_scale; --s) {
            scales[static_cast<std::size_t>(s - lowest_scale)] =
                constant(SparseTensor3::from_sorted({}, {}, weights_.width, s));
        }
        return scales;
    }
    Traced occ = constant(make_occupancy(recon.coords(), top));
    Traced x = sparse_conv(tape, occ, kernel("extractor.lift"), recon.coords(), top);
    for (int s = top - 1; s >= lowest_scale; --s) {
        x = down_conv_s2(tape, x, kernel("extractor.down"));
        x = relu(tape, x);
        for (int i = 0; i < 3; ++i)
            x = irn_forward(tape, x, irn("extractor.irn" + std::to_string(i)));
        scales[static_cast<std::size_t>(s - lowest_scale)] = x;
    }
    return scales;
}

FrameContext Model::extract_pyramid(const SparseTensor3& recon, int lowest_scale) {
    FrameContext ctx;
    ctx.top_scale = recon.bit_depth();
    ctx.lowest_scale = lowest_scale;
    std::vector<Traced> traced = extract_pyramid_traced(nullptr, recon, lowest_scale);
    ctx.scales.reserve(traced.size());
    for (Traced& t : traced) ctx.scales.push_back(std::move(t.value));
    return ctx;
}

Traced Model::predictor_transfer(Tape* tape, const Traced& ref_feats,
                                 std::vector<Coord3> target_coords, int bit_depth) {
    return sparse_conv(tape, ref_feats, kernel("predictor"), std::move(target_coords),
                       bit_depth);
}

Traced Model::encode_latent(Tape* tape, const SparseTensor3& geometry, int steps) {
    const int top = geometry.bit_depth();
    Traced occ = constant(make_occupancy(geometry.coords(), top));
    Traced x = sparse_conv(tape, occ, kernel("encoder.lift"), geometry.coords(), top);
    for (int s = 0; s < steps; ++s) {
        x = down_conv_s2(tape, x, kernel("encoder.down"));
        x = relu(tape, x);
        for (int i = 0; i < 3; ++i)
            x = irn_forward(tape, x, irn("encoder.irn" + std::to_string(i)));
    }
    return sparse_conv(tape, x, kernel("encoder.out"), x.value.coords(),
                       x.value.bit_depth());
}

Traced Model::carry_latent(Tape* tape, const Traced& latent,
                           std::vector<Coord3> target_coords, int bit_depth) {
    return sparse_conv(tape, latent, kernel("lossy.carry"), std::move(target_coords),
                       bit_depth);
}

Traced Model::upscale_coords(Tape* tape, const Traced& t) {
    std::vector<Coord3> coords = t.value.coords();
    for (Coord3& c : coords) c = Coord3{c.x << 1, c.y << 1, c.z << 1};
    Traced out;
    out.value = SparseTensor3::from_sorted(std::move(coords), t.value.feats(),
                                           t.value.channels(), t.value.bit_depth() + 1);
    out.grad_id = -1;
    if (tape && t.grad_id >= 0) {
        out.grad_id = tape->alloc(out.value.feats().size());
        tape->record([in_id = t.grad_id, out_id = out.grad_id](Tape& tp) {
            const auto& go = tp.grad(out_id);
            auto& gi = tp.grad(in_id);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        });
    }
    return out;
}

Traced Model::sopa_backbone(Tape* tape, const std::string& prefix, const Traced& fused) {
    Traced x = sparse_conv(tape, fused, kernel(prefix + ".fuse"), fused.value.coords(),
                           fused.value.bit_depth());
    x = relu(tape, x);
    for (int i = 0; i < 3; ++i)
        x = irn_forward(tape, x, irn(prefix + ".pre.irn" + std::to_string(i)));
    x = up_conv_s2(tape, x, kernel(prefix + ".up"));
    x = relu(tape, x);
    for (int i = 0; i < 3; ++i)
        x = irn_forward(tape, x, irn(prefix + ".post.irn" + std::to_string(i)));
    return x;
}

Traced Model::sopa_head(Tape* tape, const std::string& prefix, const Traced& feats) {
    Traced logits = sparse_conv(tape, feats, kernel(prefix + ".head"),
                                feats.value.coords(), feats.value.bit_depth());
    return sigmoid(tape, logits);
}

Traced Model::stage_condition(Tape* tape, const std::vector<Coord3>& decided,
                              std::vector<Coord3> stage_coords, int bit_depth) {
    Traced occ = constant(make_occupancy(decided, bit_depth));
    return sparse_conv(tape, occ, kernel("sopa8.cond"), std::move(stage_coords),
                       bit_depth);
}

OccupancyPrediction sopa_1stage(Model& m, Tape* tape, const PriorBundle& bundle,
                                const Traced* latent, Traced* traced_probs_out) {
    Traced fused = concat_channels(tape, bundle.spatial, bundle.temporal);
    if (latent) fused = concat_channels(tape, fused, *latent);
    Traced feats = m.sopa_backbone(tape, latent ? "sopa1" : "sopa8", fused);
    Traced probs = m.sopa_head(tape, latent ? "sopa1" : "sopa8", feats);

    OccupancyPrediction pred;
    pred.coords = probs.value.coords();
    pred.probs.resize(probs.value.size());
    for (std::size_t i = 0; i < pred.probs.size(); ++i)
        pred.probs[i] = clamp_prob(probs.value.feats()[i]);
    if (traced_probs_out) *traced_probs_out = std::move(probs);
    return pred;
}

std::vector<Coord3> sopa_8stage(Model& m, Tape* tape, const PriorBundle& bundle,
                                const StageBits& callback, TracedScalar* bce_out) {
    Traced fused = concat_channels(tape, bundle.spatial, bundle.temporal);
    Traced base = m.sopa_backbone(tape, "sopa8", fused);
    const int child_depth = bundle.scale + 1;
    const std::size_t n_parents = bundle.spatial.value.size();

    std::vector<Coord3> decided;
    for (int g = 0; g < 8; ++g) {
        // Candidates are emitted 8 per parent in octant order, so stage g
        // owns rows 8j+g, which are Morton-sorted among themselves.
        std::vector<std::uint32_t> rows(n_parents);
        std::vector<Coord3> stage_coords(n_parents);
        for (std::size_t j = 0; j < n_parents; ++j) {
            rows[j] = static_cast<std::uint32_t>(8 * j + g);
            stage_coords[j] = base.value.coords()[rows[j]];
        }
        Traced stage_feats = gather_rows(tape, base, std::move(rows));
        Traced cond = m.stage_condition(tape, decided, stage_coords, child_depth);
        Traced pre = add_features(tape, stage_feats, cond);
        Traced probs = m.sopa_head(tape, "sopa8", pre);

        std::vector<float> clamped(probs.value.size());
        for (std::size_t i = 0; i < clamped.size(); ++i)
            clamped[i] = clamp_prob(probs.value.feats()[i]);

        const std::vector<std::uint8_t> bits = callback(g, stage_coords, clamped);
        if (bits.size() != stage_coords.size())
            throw ProtocolError("sopa_8stage: stage callback bit count mismatch");

        if (tape && bce_out) {
            TracedScalar stage_bce = bce_loss_bits(tape, probs, bits);
            *bce_out = bce_out->grad_id >= 0 || bce_out->value != 0.0
                           ? scalar_add(tape, *bce_out, stage_bce)
                           : stage_bce;
        }

        std::vector<Coord3> occupied;
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (bits[i]) occupied.push_back(stage_coords[i]);
        // Merge two Morton-sorted disjoint sets.
        std::vector<Coord3> merged;
        merged.reserve(decided.size() + occupied.size());
        std::merge(decided.begin(), decided.end(), occupied.begin(), occupied.end(),
                   std::back_inserter(merged),
                   [](const Coord3& a, const Coord3& b) {
                       return morton_encode(a) < morton_encode(b);
                   });
        decided = std::move(merged);
    }
    return decided;
}

}  // namespace dpcc
