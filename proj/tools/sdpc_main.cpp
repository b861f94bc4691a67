// sdpc: sparse dynamic point-cloud geometry codec CLI.
//
// Exit codes: 0 success, 2 usage error, 3 I/O error, 4 format/decode error,
// 5 training divergence. Every flag can also be set through an environment
// variable named SDPC_<FLAG> (dashes as underscores, upper case); an explicit
// flag wins over the environment. Frames inside a directory are processed in
// lexicographic filename order, which fixes the GOP structure (first frame
// intra, the rest predicted).

#include <CLI11.hpp>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dpcc/codec.hpp"
#include "dpcc/io_metrics.hpp"
#include "dpcc/training.hpp"

namespace fs = std::filesystem;
using namespace dpcc;

namespace {

std::vector<std::string> expand_inputs(const std::vector<std::string>& inputs) {
    std::vector<std::string> files;
    for (const std::string& in : inputs) {
        if (fs::is_directory(in)) {
            std::vector<std::string> dir_files;
            for (const auto& e : fs::directory_iterator(in)) {
                if (!e.is_regular_file()) continue;
                std::string ext = e.path().extension().string();
                for (char& c : ext) c = static_cast<char>(std::tolower(c));
                if (ext == ".ply") dir_files.push_back(e.path().string());
            }
            std::sort(dir_files.begin(), dir_files.end());
            files.insert(files.end(), dir_files.begin(), dir_files.end());
        } else {
            files.push_back(in);
        }
    }
    if (files.empty()) throw IoError("no input PLY files found");
    return files;
}

std::vector<SparseTensor3> load_frames(const std::vector<std::string>& files,
                                       int bit_depth) {
    std::vector<SparseTensor3> frames;
    frames.reserve(files.size());
    for (const std::string& f : files)
        frames.push_back(voxelize(read_ply(f), bit_depth).geometry);
    return frames;
}

int cmd_encode(const std::vector<std::string>& inputs, const std::string& weights_path,
               const std::string& mode, int model_id, int m, int bit_depth,
               bool intra_only, bool residual, const std::string& out_path) {
    std::uint32_t hash = 0;
    ModelWeights w = load_weights(weights_path, &hash);
    Model model(std::move(w));

    EncodeConfig cfg;
    cfg.mode = mode == "lossy" ? EncodeConfig::Mode::Lossy : EncodeConfig::Mode::Lossless;
    cfg.m = m;
    cfg.model_id = model_id;
    cfg.inter_enabled = !intra_only;
    cfg.residual_baseline = residual;
    cfg.bit_depth = bit_depth;

    const std::vector<std::string> files = expand_inputs(inputs);
    const std::vector<SparseTensor3> frames = load_frames(files, bit_depth);
    std::vector<std::uint64_t> counts;
    for (const auto& f : frames) counts.push_back(f.size());

    Codec codec(model, cfg, hash);
    Bitstream bs = codec.encode_sequence(frames, nullptr, &counts);
    save_bitstream(bs, out_path);

    for (std::size_t t = 0; t < bs.frames.size(); ++t) {
        const FrameRecord& rec = bs.frames[t];
        std::cout << "frame " << t << " (" << (rec.header.frame_type ? 'P' : 'I')
                  << "): " << payload_bytes(rec) << " bytes, "
                  << bits_per_point(payload_bytes(rec), rec.header.point_count)
                  << " bpp\n";
    }
    std::cout << "total: " << payload_bytes(bs) << " payload bytes, " << bs.frames.size()
              << " frames -> " << out_path << "\n";
    return 0;
}

int cmd_decode(const std::string& stream_path, const std::string& weights_path,
               const std::string& out_dir) {
    std::uint32_t hash = 0;
    ModelWeights w = load_weights(weights_path, &hash);
    Bitstream bs = load_bitstream(stream_path);
    if (bs.weight_hash != hash)
        throw ProtocolError("stream was encoded with different weights (hash mismatch)");
    Model model(std::move(w));
    Codec codec(model, bs.config, hash);
    const std::vector<SparseTensor3> recons = codec.decode_sequence(bs);

    fs::create_directories(out_dir);
    for (std::size_t t = 0; t < recons.size(); ++t) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04zu.ply", t);
        RawCloud cloud;
        cloud.points.reserve(recons[t].size());
        for (const Coord3& c : recons[t].coords())
            cloud.points.push_back({static_cast<float>(c.x), static_cast<float>(c.y),
                                    static_cast<float>(c.z)});
        write_ply(cloud, (fs::path(out_dir) / name).string(), false);
    }
    std::cout << "decoded " << recons.size() << " frames -> " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_path) {
    const TrainConfig cfg = TrainConfig::from_file(config_path);
    TrainResult result;
    Model model = train_toy(cfg, &result);
    const std::uint32_t hash = save_weights(model.weights(), out_path);
    std::cout << "trained " << cfg.steps << " steps, final loss "
              << result.loss_history.back() << " bits, weights -> " << out_path
              << " (hash " << hash << ")\n";
    return 0;
}

std::vector<RdPoint> read_report_points(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open report: " + path);
    std::string line;
    if (!std::getline(f, line)) throw FormatError("report: empty file: " + path);
    std::vector<RdPoint> pts;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ls(line);
        std::uint32_t frame;
        char type;
        std::size_t bytes;
        RdPoint p;
        if (!(ls >> frame >> type >> bytes >> p.bpp >> p.psnr))
            throw FormatError("report: malformed row in " + path);
        if (type == 'A') continue;  // summary row is not a curve point
        pts.push_back(p);
    }
    return pts;
}

int cmd_eval(const std::string& ref_dir, const std::string& stream_path,
             const std::string& weights_path, const std::string& out_path,
             const std::string& bd_against) {
    std::uint32_t hash = 0;
    ModelWeights w = load_weights(weights_path, &hash);
    Bitstream bs = load_bitstream(stream_path);
    if (bs.weight_hash != hash)
        throw ProtocolError("stream was encoded with different weights (hash mismatch)");
    Model model(std::move(w));
    Codec codec(model, bs.config, hash);
    const std::vector<SparseTensor3> recons = codec.decode_sequence(bs);

    const std::vector<std::string> refs = expand_inputs({ref_dir});
    if (refs.size() != recons.size())
        throw FormatError("eval: reference frame count does not match the stream");
    const std::vector<SparseTensor3> ref_frames =
        load_frames(refs, bs.config.bit_depth);

    std::vector<FrameStat> stats;
    double bpp_sum = 0.0, d1_sum = 0.0;
    std::size_t bytes_sum = 0;
    for (std::size_t t = 0; t < recons.size(); ++t) {
        FrameStat s;
        s.frame = static_cast<std::uint32_t>(t);
        s.type = bs.frames[t].header.frame_type ? 'P' : 'I';
        s.bytes = payload_bytes(bs.frames[t]);
        s.bpp = bits_per_point(s.bytes, bs.frames[t].header.point_count);
        s.d1 = d1_psnr(recons[t], ref_frames[t]);
        bytes_sum += s.bytes;
        bpp_sum += s.bpp;
        d1_sum += s.d1;
        stats.push_back(s);
    }
    FrameStat avg;
    avg.frame = static_cast<std::uint32_t>(stats.size());
    avg.type = 'A';
    avg.bytes = bytes_sum;
    avg.bpp = bpp_sum / static_cast<double>(stats.size());
    avg.d1 = d1_sum / static_cast<double>(stats.size());
    stats.push_back(avg);
    write_csv_report(stats, out_path);
    std::cout << "eval: " << recons.size() << " frames, avg " << avg.bpp << " bpp, avg "
              << avg.d1 << " dB -> " << out_path << "\n";

    if (!bd_against.empty()) {
        std::vector<RdPoint> mine;
        for (const FrameStat& s : stats)
            if (s.type != 'A') mine.push_back({s.bpp, s.d1});
        const std::vector<RdPoint> other = read_report_points(bd_against);
        std::cout << "bd-rate vs " << bd_against << ": "
                  << bd_rate_percent(other, mine) << "%\n";
    }
    return 0;
}

int cmd_info(const std::string& stream_path) {
    const Bitstream bs = load_bitstream(stream_path);
    std::cout << "version: " << int(bs.version) << "\n"
              << "mode: "
              << (bs.config.mode == EncodeConfig::Mode::Lossless ? "lossless" : "lossy")
              << "\n"
              << "lossless scales (m): " << bs.config.m << "\n"
              << "model id: " << bs.config.model_id << "\n"
              << "inter: " << (bs.config.inter_enabled ? "on" : "off") << "\n"
              << "residual baseline: " << (bs.config.residual_baseline ? "on" : "off")
              << "\n"
              << "bit depth: " << bs.config.bit_depth << "\n"
              << "weight hash: " << bs.weight_hash << "\n"
              << "frames: " << bs.frames.size() << "\n";
    for (std::size_t t = 0; t < bs.frames.size(); ++t) {
        const FrameHeader& h = bs.frames[t].header;
        std::cout << "  frame " << h.frame_index << " " << (h.frame_type ? 'P' : 'I')
                  << " points=" << h.point_count
                  << " bytes=" << payload_bytes(bs.frames[t]) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse dynamic point-cloud geometry codec"};
    app.require_subcommand(1);

    std::vector<std::string> inputs;
    std::string weights, mode = "lossless", output, stream, ref_dir, config, bd_against;
    int model_id = 0, m = 2, bit_depth = 10;
    bool intra_only = false, residual = false;

    CLI::App* enc = app.add_subcommand("encode", "encode PLY frames into a stream");
    enc->add_option("inputs", inputs, "PLY files or a directory")->required();
    enc->add_option("--weights", weights)->envname("SDPC_WEIGHTS")->required();
    enc->add_option("--mode", mode)
        ->check(CLI::IsMember({"lossless", "lossy"}))
        ->envname("SDPC_MODE");
    enc->add_option("--model-id", model_id)->envname("SDPC_MODEL_ID");
    enc->add_option("--m", m)->envname("SDPC_M");
    enc->add_option("--bit-depth", bit_depth)->envname("SDPC_BIT_DEPTH");
    enc->add_flag("--intra-only", intra_only)->envname("SDPC_INTRA_ONLY");
    enc->add_flag("--residual-baseline", residual)->envname("SDPC_RESIDUAL_BASELINE");
    enc->add_option("-o,--output", output)->envname("SDPC_OUTPUT")->required();

    CLI::App* dec = app.add_subcommand("decode", "decode a stream into PLY frames");
    dec->add_option("stream", stream)->envname("SDPC_STREAM")->required();
    dec->add_option("--weights", weights)->envname("SDPC_WEIGHTS")->required();
    dec->add_option("-o,--output", output)->envname("SDPC_OUTPUT")->required();

    CLI::App* trn = app.add_subcommand("train", "train a model on synthetic sequences");
    trn->add_option("--config", config)->envname("SDPC_CONFIG")->required();
    trn->add_option("-o,--output", output)->envname("SDPC_OUTPUT")->required();

    CLI::App* evl = app.add_subcommand("eval", "decode and score a stream");
    evl->add_option("--ref", ref_dir)->envname("SDPC_REF")->required();
    evl->add_option("--stream", stream)->envname("SDPC_STREAM")->required();
    evl->add_option("--weights", weights)->envname("SDPC_WEIGHTS")->required();
    evl->add_option("-o,--output", output)->envname("SDPC_OUTPUT")->required();
    evl->add_option("--bd", bd_against, "second report.csv to compare against")
        ->envname("SDPC_BD");

    CLI::App* inf = app.add_subcommand("info", "print stream metadata");
    inf->add_option("stream", stream)->envname("SDPC_STREAM")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (enc->parsed())
            return cmd_encode(inputs, weights, mode, model_id, m, bit_depth, intra_only,
                              residual, output);
        if (dec->parsed()) return cmd_decode(stream, weights, output);
        if (trn->parsed()) return cmd_train(config, output);
        if (evl->parsed()) return cmd_eval(ref_dir, stream, weights, output, bd_against);
        if (inf->parsed()) return cmd_info(stream);
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 2;
}
