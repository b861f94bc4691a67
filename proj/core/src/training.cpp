#include "dpcc/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace dpcc {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t k = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    k = (k ^ (k >> 30)) * 0xbf58476d1ce4e5b9ull;
    k = (k ^ (k >> 27)) * 0x94d049bb133111ebull;
    return k ^ (k >> 31);
}

std::vector<std::uint8_t> truth_bits(std::span<const Coord3> candidates,
                                     const MortonMap& truth) {
    std::vector<std::uint8_t> bits(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        bits[i] = truth.find(morton_encode(candidates[i])) >= 0 ? 1 : 0;
    return bits;
}

std::vector<float> uniform_noise(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<float> dist(-0.5f, 0.5f);
    std::vector<float> v(n);
    for (float& x : v) x = dist(rng);
    return v;
}

}  // namespace

void TrainConfig::validate() const {
    if (width < 4 || width % 4 != 0)
        throw FormatError("TrainConfig: width must be a positive multiple of 4");
    if (bit_depth < 4 || bit_depth > kMaxBitDepth)
        throw FormatError("TrainConfig: bit_depth must be in [4, 16]");
    if (lossless_scales < 1 || lossless_scales >= bit_depth)
        throw FormatError("TrainConfig: lossless_scales must satisfy 1 <= m < bit_depth");
    if (steps < 1) throw FormatError("TrainConfig: steps must be positive");
    if (!(lr > 0.0f)) throw FormatError("TrainConfig: lr must be positive");
    if (rate_weight < 0.0f)
        throw FormatError("TrainConfig: rate_weight must be non-negative");
    if (latent_support < 1)
        throw FormatError("TrainConfig: latent_support must be positive");
    if (train_residual && !train_lossy)
        throw FormatError("TrainConfig: train_residual requires train_lossy");
}

TrainConfig TrainConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open training config: " + path);
    TrainConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("training config line " + std::to_string(line_no) +
                              ": expected key=value");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "width") cfg.width = std::stoi(val);
            else if (key == "bit_depth") cfg.bit_depth = std::stoi(val);
            else if (key == "lossless_scales") cfg.lossless_scales = std::stoi(val);
            else if (key == "steps") cfg.steps = std::stoi(val);
            else if (key == "lr") cfg.lr = std::stof(val);
            else if (key == "rate_weight") cfg.rate_weight = std::stof(val);
            else if (key == "seed") cfg.seed = std::stoull(val);
            else if (key == "train_lossy") cfg.train_lossy = val == "1" || val == "true";
            else if (key == "train_residual")
                cfg.train_residual = val == "1" || val == "true";
            else if (key == "latent_support") cfg.latent_support = std::stoi(val);
            else
                throw FormatError("training config line " + std::to_string(line_no) +
                                  ": unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw FormatError("training config line " + std::to_string(line_no) +
                              ": bad value for '" + key + "'");
        } catch (const std::out_of_range&) {
            throw FormatError("training config line " + std::to_string(line_no) +
                              ": bad value for '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

std::vector<SparseTensor3> toy_sequence(std::uint64_t seed, int frames,
                                        int bit_depth) {
    if (frames < 1) throw ShapeError("toy_sequence: needs at least one frame");
    if (bit_depth < 4 || bit_depth > kMaxBitDepth)
        throw ShapeError("toy_sequence: bit depth out of range");
    std::mt19937_64 rng(seed);
    const float grid = static_cast<float>(1u << bit_depth);
    std::uniform_real_distribution<float> center_dist(0.35f * grid, 0.65f * grid);
    std::uniform_real_distribution<float> radius_dist(0.12f * grid, 0.20f * grid);
    std::uniform_real_distribution<float> vel_dist(-1.5f, 1.5f);
    std::uniform_real_distribution<float> omega_dist(-0.15f, 0.15f);
    std::uniform_int_distribution<int> shape_dist(0, 1);

    const float cx = center_dist(rng), cy = center_dist(rng), cz = center_dist(rng);
    const float r = radius_dist(rng);
    const float vx = vel_dist(rng), vy = vel_dist(rng), vz = vel_dist(rng);
    const float omega = omega_dist(rng);
    const int shape = shape_dist(rng);

    // Shell template around the origin: a sphere surface or a cube surface.
    struct Vec3 {
        float x, y, z;
    };
    std::vector<Vec3> shell;
    const int lim = static_cast<int>(std::ceil(r)) + 1;
    for (int x = -lim; x <= lim; ++x)
        for (int y = -lim; y <= lim; ++y)
            for (int z = -lim; z <= lim; ++z) {
                bool on;
                if (shape == 0) {
                    const float d = std::sqrt(static_cast<float>(x * x + y * y + z * z));
                    on = std::fabs(d - r) <= 0.87f;
                } else {
                    const int cheb = std::max({std::abs(x), std::abs(y), std::abs(z)});
                    on = cheb == static_cast<int>(std::lround(r));
                }
                if (on)
                    shell.push_back({static_cast<float>(x), static_cast<float>(y),
                                     static_cast<float>(z)});
            }

    const std::uint32_t max_coord = (1u << bit_depth) - 1;
    std::vector<SparseTensor3> out;
    for (int t = 0; t < frames; ++t) {
        const float theta = omega * static_cast<float>(t);
        const float c = std::cos(theta), s = std::sin(theta);
        const float ox = cx + vx * static_cast<float>(t);
        const float oy = cy + vy * static_cast<float>(t);
        const float oz = cz + vz * static_cast<float>(t);
        std::set<MortonKey> keys;
        for (const Vec3& p : shell) {
            const float rx = c * p.x - s * p.y;
            const float ry = s * p.x + c * p.y;
            const auto clamp_axis = [max_coord](float v) {
                const long q = std::lround(v);
                return static_cast<std::uint32_t>(
                    std::clamp<long>(q, 0, static_cast<long>(max_coord)));
            };
            keys.insert(morton_encode(
                {clamp_axis(ox + rx), clamp_axis(oy + ry), clamp_axis(oz + p.z)}));
        }
        std::vector<Coord3> coords;
        coords.reserve(keys.size());
        for (MortonKey k : keys) coords.push_back(morton_decode(k));
        out.push_back(make_occupancy(std::move(coords), bit_depth));
    }
    return out;
}

void AdamOptimizer::update(const std::string& key, std::vector<float>& param,
                           std::vector<float>& grad) {
    if (grad.empty()) return;
    if (grad.size() != param.size())
        throw StateError("AdamOptimizer: gradient/parameter size mismatch");
    Slot& slot = slots_[key];
    if (slot.m.empty()) {
        slot.m.assign(param.size(), 0.0f);
        slot.v.assign(param.size(), 0.0f);
    }
    const float bc1 =
        1.0f - std::pow(beta1_, static_cast<float>(t_));
    const float bc2 =
        1.0f - std::pow(beta2_, static_cast<float>(t_));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const float g = grad[i];
        slot.m[i] = beta1_ * slot.m[i] + (1.0f - beta1_) * g;
        slot.v[i] = beta2_ * slot.v[i] + (1.0f - beta2_) * g * g;
        const float mhat = slot.m[i] / bc1;
        const float vhat = slot.v[i] / bc2;
        param[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    std::fill(grad.begin(), grad.end(), 0.0f);
}

void AdamOptimizer::step(Model& model) {
    ++t_;
    for (auto& [path, k] : model.weights().kernels) {
        update(path + ".w", k.weights, k.weight_grad);
        update(path + ".b", k.bias, k.bias_grad);
    }
    FactorizedModel& fm = model.entropy();
    update("entropy.logits", fm.logits(), fm.logit_grad());
}

Model train_toy(const TrainConfig& cfg, TrainResult* result) {
    cfg.validate();
    Model model = Model::init(cfg.width, cfg.seed, cfg.latent_support);
    AdamOptimizer opt(cfg.lr);

    const int n = cfg.bit_depth;
    const int base = std::min(3, n);
    const int m = cfg.lossless_scales;
    // The reference pyramid must reach down to the coarsest scale any loss
    // term conditions on: `base` for the lossless terms, `m` for the lossy.
    const int lowest = std::min(base, m);

    for (int step = 0; step < cfg.steps; ++step) {
        const std::uint64_t seq_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(step));
        const std::vector<SparseTensor3> frames = toy_sequence(seq_seed, 2, n);
        const SparseTensor3& ref = frames[0];
        const SparseTensor3& cur = frames[1];
        std::mt19937_64 noise_rng(mix_seed(seq_seed, 0x5eedu));

        std::vector<std::vector<Coord3>> pyr(static_cast<std::size_t>(n) + 1);
        pyr[static_cast<std::size_t>(n)] = cur.coords();
        for (int s = n - 1; s >= lowest; --s)
            pyr[static_cast<std::size_t>(s)] =
                downsample_coords(pyr[static_cast<std::size_t>(s + 1)]);

        Tape tape;
        std::vector<Traced> ref_scales =
            model.extract_pyramid_traced(&tape, ref, lowest);

        TracedScalar total;
        // Lossless occupancy loss over all scales, inter conditioned.
        for (int s = base; s < n; ++s) {
            const MortonMap truth(pyr[static_cast<std::size_t>(s + 1)]);
            PriorBundle bundle;
            bundle.scale = s;
            bundle.spatial =
                model.lift_spatial(&tape, pyr[static_cast<std::size_t>(s)], s);
            bundle.temporal = model.predictor_transfer(
                &tape, ref_scales[static_cast<std::size_t>(s - lowest)],
                pyr[static_cast<std::size_t>(s)], s);
            auto cb = [&](int, std::span<const Coord3> coords,
                          std::span<const float>) { return truth_bits(coords, truth); };
            sopa_8stage(model, &tape, bundle, cb, &total);
        }

        if (cfg.train_lossy) {
            const int steps_lat = n - m;
            Traced latent = model.encode_latent(&tape, cur, steps_lat);
            Traced noisy = add_constant(&tape, latent,
                                        uniform_noise(noise_rng, latent.value.feats().size()));
            TracedScalar rate = factorized_rate_bits(&tape, noisy, model.entropy());
            total = scalar_add(&tape, total,
                               scalar_scale(&tape, rate, cfg.rate_weight));

            if (cfg.train_residual) {
                Traced ref_latent = model.encode_latent(&tape, ref, steps_lat);
                Traced pred =
                    sparse_conv(&tape, ref_latent, model.kernel("residual.pred"),
                                latent.value.coords(), m);
                Traced resid = sub_features(&tape, latent, pred);
                Traced noisy_resid = add_constant(
                    &tape, resid,
                    uniform_noise(noise_rng, resid.value.feats().size()));
                TracedScalar rrate =
                    factorized_rate_bits(&tape, noisy_resid, model.entropy());
                total = scalar_add(&tape, total,
                                   scalar_scale(&tape, rrate, cfg.rate_weight));
            }

            // 1-stage occupancy loss along the lossy scales, latent carried up.
            Traced carried = model.carry_latent(
                &tape, noisy, pyr[static_cast<std::size_t>(m)], m);
            for (int s = m; s < n; ++s) {
                const MortonMap truth(pyr[static_cast<std::size_t>(s + 1)]);
                PriorBundle bundle;
                bundle.scale = s;
                bundle.spatial =
                    model.lift_spatial(&tape, pyr[static_cast<std::size_t>(s)], s);
                bundle.temporal = model.predictor_transfer(
                    &tape, ref_scales[static_cast<std::size_t>(s - lowest)],
                    pyr[static_cast<std::size_t>(s)], s);
                Traced probs;
                OccupancyPrediction pred =
                    sopa_1stage(model, &tape, bundle, &carried, &probs);
                const std::vector<std::uint8_t> bits = truth_bits(pred.coords, truth);
                total = scalar_add(&tape, total, bce_loss_bits(&tape, probs, bits));
                if (s + 1 < n)
                    carried = model.carry_latent(
                        &tape, Model::upscale_coords(&tape, carried),
                        pyr[static_cast<std::size_t>(s + 1)], s + 1);
            }
        }

        if (!std::isfinite(total.value))
            throw TrainingError("training diverged at step " + std::to_string(step));
        if (total.grad_id < 0)
            throw TrainingError("training loss has no gradient at step " +
                                std::to_string(step));
        tape.backward(total.grad_id);
        opt.step(model);
        if (result) result->loss_history.push_back(total.value);
    }

    model.entropy().freeze();
    return model;
}

}  // namespace dpcc
