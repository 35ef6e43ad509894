// dmsk: corpus generation, progressive training, generation, editing,
// stitching and evaluation for the masked dance-motion pipeline.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dmsk/adapters.hpp"
#include "dmsk/checkpoint.hpp"
#include "dmsk/config.hpp"
#include "dmsk/errors.hpp"
#include "dmsk/metrics.hpp"
#include "dmsk/motion.hpp"
#include "dmsk/sampler.hpp"
#include "dmsk/tokenizer.hpp"
#include "dmsk/train.hpp"

namespace fs = std::filesystem;
using namespace dmsk;

namespace {

void apply_thread_cap() {
#ifdef _OPENMP
    if (const char* env = std::getenv("DMSK_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(std::min(n, omp_get_max_threads()));
    }
#endif
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep))
        if (!item.empty()) out.push_back(item);
    return out;
}

Config load_config_arg(const std::string& path) {
    Config cfg;
    if (!path.empty()) cfg.apply_file(path);
    return cfg;
}

ModelSet load_models_frozen(const std::string& path) {
    ModelSet m = ModelSet::load(Checkpoint::load(path));
    m.freeze_all();
    return m;
}

std::vector<std::string> sorted_files(const std::string& dir, const std::string& ext) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ext)
            out.push_back(e.path().string());
    std::sort(out.begin(), out.end());
    return out;
}

int run_gen_data(const std::string& out_dir, uint64_t seed, const std::string& genres_arg,
                 int clips, double seconds, bool force, const std::string& config_path) {
    if (clips <= 0) throw UsageError("--clips must be positive");
    if (seconds <= 0) throw UsageError("--seconds must be positive");
    Config cfg = load_config_arg(config_path);
    cfg.set("seed", std::to_string(seed));
    const std::vector<std::string> genres = split_list(genres_arg, ',');
    if (genres.empty()) throw UsageError("--genres must name at least one genre");
    const int fps = cfg.i("corpus.fps");
    const std::vector<CorpusClip> corpus =
        synth_corpus(seed, genres, clips, static_cast<float>(seconds), fps);
    save_corpus(out_dir, corpus, cfg, force);
    std::printf("wrote %zu clips (%zu genres x %d) to %s\n", corpus.size(), genres.size(),
                clips, out_dir.c_str());
    return 0;
}

int run_train(const std::string& stage, const std::string& config_path,
              const std::string& data_dir, const std::string& out_path,
              const std::string& resume) {
    TrainOptions opt;
    opt.stage = stage;
    opt.data_dir = data_dir;
    opt.out_path = out_path;
    opt.resume_path = resume;
    opt.cfg = load_config_arg(config_path);
    train_stage(opt);
    std::printf("stage %s complete -> %s\n", stage.c_str(), out_path.c_str());
    return 0;
}

int run_generate(const std::string& ckpt, const std::string& beats_path,
                 const std::string& genre, int frames, uint64_t seed,
                 const std::string& out_path, const std::string& trace_path,
                 bool unconditional, const std::string& config_path) {
    Config cfg = load_config_arg(config_path);
    if (beats_path.empty() && genre.empty() && !unconditional)
        throw UsageError("need --beats and/or --genre, or --unconditional");
    ModelSet models = load_models_frozen(ckpt);

    if (frames <= 0) throw UsageError("--frames must be positive");
    const int ds = models.tokenizer.downsample;
    int use_frames = frames;
    if (use_frames % ds != 0) {
        use_frames = ((use_frames + ds - 1) / ds) * ds;
        std::fprintf(stderr, "warning: rounding frames up to %d (multiple of %d)\n",
                     use_frames, ds);
    }

    GuidanceBundle bundle;
    bundle.w_u = cfg.f("sample.w_u");
    bundle.w_t = cfg.f("sample.w_t");
    bundle.w_a = cfg.f("sample.w_a");
    bundle.w_p = cfg.f("sample.w_p");
    bundle.unconditional = unconditional;
    if (!genre.empty()) bundle.genre = models.genre_id_of(genre);
    if (!beats_path.empty()) bundle.music = read_beats(beats_path);

    SampleSettings settings = SampleSettings::from_config(cfg);
    Rng rng(stage_mix(seed, 0x9e37, 0));
    DecodeTrace trace;
    TokenGrid grid = parallel_decode(models, bundle, use_frames / ds, settings, rng,
                                     trace_path.empty() ? nullptr : &trace);
    MotionSequence motion = models.tokenizer.decode(grid, use_frames);
    write_motion(out_path, motion);
    if (!trace_path.empty()) trace.write_csv(trace_path, cfg.echo());
    std::printf("generated %d frames -> %s\n", motion.frames, out_path.c_str());
    return 0;
}

std::vector<std::pair<int, int>> parse_ranges(const std::string& spec) {
    std::vector<std::pair<int, int>> out;
    for (const std::string& part : split_list(spec, ',')) {
        const size_t colon = part.find(':');
        if (colon == std::string::npos)
            throw UsageError("bad range (want begin:end): " + part);
        out.emplace_back(std::atoi(part.substr(0, colon).c_str()),
                         std::atoi(part.substr(colon + 1).c_str()));
    }
    return out;
}

int run_edit(const std::string& mode, const std::string& ckpt, const std::string& motion_path,
             const std::string& constraints_path, const std::string& ranges_spec,
             const std::string& genre, const std::string& beats_path, uint64_t seed,
             const std::string& out_path, const std::string& config_path) {
    Config cfg = load_config_arg(config_path);
    ModelSet models = load_models_frozen(ckpt);
    MotionSequence motion = read_motion(motion_path);

    GuidanceBundle bundle;
    bundle.w_u = cfg.f("sample.w_u");
    bundle.w_t = cfg.f("sample.w_t");
    bundle.w_a = cfg.f("sample.w_a");
    bundle.w_p = cfg.f("sample.w_p");
    if (!genre.empty()) bundle.genre = models.genre_id_of(genre);
    if (!beats_path.empty()) bundle.music = read_beats(beats_path);
    bundle.unconditional = bundle.genre < 0 && !bundle.music;

    SampleSettings settings = SampleSettings::from_config(cfg);
    Rng rng(stage_mix(seed, 0xed17, 0));

    if (mode == "spatial") {
        if (constraints_path.empty())
            throw UsageError("spatial mode requires --constraints");
        PoseConstraint constraint = read_constraint(constraints_path);
        EditResult res = edit_spatial(models, motion, constraint, bundle, settings,
                                      cfg.f("itto.lr"), cfg.i("itto.iters"), rng);
        std::printf("joint_dist_pre=%.9g\njoint_dist_post=%.9g\n",
                    static_cast<double>(res.joint_dist_pre),
                    static_cast<double>(res.joint_dist_post));
        write_motion(out_path, res.motion);
    } else if (mode == "temporal") {
        if (ranges_spec.empty()) throw UsageError("temporal mode requires --keep-ranges");
        MotionSequence out =
            edit_temporal(models, motion, parse_ranges(ranges_spec), bundle, settings, rng);
        write_motion(out_path, out);
    } else {
        throw UsageError("--mode must be spatial or temporal");
    }
    std::printf("edited motion -> %s\n", out_path.c_str());
    return 0;
}

int run_stitch(const std::string& ckpt, const std::string& spec_path, int overlap,
               uint64_t seed, const std::string& out_path, const std::string& config_path) {
    Config cfg = load_config_arg(config_path);
    ModelSet models = load_models_frozen(ckpt);

    std::ifstream spec(spec_path);
    if (!spec) throw DataError("cannot open segment spec: " + spec_path);
    std::vector<SegmentSpec> segments;
    std::string line;
    const fs::path base = fs::path(spec_path).parent_path();
    while (std::getline(spec, line)) {
        if (line.empty() || line[0] == '#') continue;
        SegmentSpec seg;
        seg.bundle.w_u = cfg.f("sample.w_u");
        seg.bundle.w_t = cfg.f("sample.w_t");
        seg.bundle.w_a = cfg.f("sample.w_a");
        seg.bundle.w_p = cfg.f("sample.w_p");
        std::stringstream ss(line);
        std::string tok;
        while (ss >> tok) {
            const size_t eq = tok.find('=');
            if (eq == std::string::npos)
                throw DataError("malformed segment spec token: " + tok);
            const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
            if (key == "frames")
                seg.frames = std::atoi(val.c_str());
            else if (key == "genre")
                seg.bundle.genre = models.genre_id_of(val);
            else if (key == "beats") {
                fs::path p(val);
                if (p.is_relative()) p = base / p;
                seg.bundle.music = read_beats(p.string());
            } else
                throw DataError("unknown segment spec key: " + key);
        }
        if (seg.frames <= 0) throw DataError("segment spec needs frames=<n>: " + line);
        if (!seg.bundle.has_any()) seg.bundle.unconditional = true;
        segments.push_back(std::move(seg));
    }
    if (segments.empty()) throw DataError("segment spec is empty");

    SampleSettings settings = SampleSettings::from_config(cfg);
    Rng rng(stage_mix(seed, 0x57a7, 0));
    MotionSequence motion = generate_long(models, segments, overlap, settings, rng);
    write_motion(out_path, motion);
    std::printf("stitched %zu segments (%d frames) -> %s\n", segments.size(), motion.frames,
                out_path.c_str());
    return 0;
}

int run_eval(const std::string& gen_dir, const std::string& ref_dir,
             const std::string& beats_dir, const std::string& report_path,
             const std::string& config_path) {
    Config cfg = load_config_arg(config_path);
    const Skeleton skel = desk_skeleton();
    const std::vector<std::string> gen_files = sorted_files(gen_dir, ".dmot");
    const std::vector<std::string> ref_files = sorted_files(ref_dir, ".dmot");
    const std::vector<std::string> beat_files = sorted_files(beats_dir, ".dbea");
    if (gen_files.empty()) throw DataError("no .dmot files in " + gen_dir);
    if (ref_files.empty()) throw DataError("no .dmot files in " + ref_dir);
    if (beat_files.size() < gen_files.size())
        throw DataError("fewer beat tracks than generated clips");

    const double sigma = cfg.f("metrics.bas_sigma");
    const float h_contact = cfg.f("metrics.h_contact");
    const float v_slide = cfg.f("metrics.v_slide");
    const int window = cfg.i("metrics.smooth_window");

    const int n_gen = static_cast<int>(gen_files.size());
    std::vector<std::vector<float>> gen_kin(n_gen), gen_geo(n_gen);
    std::vector<double> clip_bas(n_gen), clip_pfc(n_gen), clip_fsr(n_gen);

    // per-clip metrics are independent; reduction order is the file order
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n_gen; ++i) {
        const MotionSequence m = read_motion(gen_files[i]);
        gen_kin[i] = kinematic_features(m, skel);
        gen_geo[i] = geometric_features(m, skel);
        const BeatTrack beats = read_beats(beat_files[i]);
        // beat times are compared in frame units (sigma is in frames)
        std::vector<double> music_frames, dance_frames;
        for (double t : beats.beat_times) music_frames.push_back(t * m.fps);
        for (double t : extract_dance_beats(m, skel, window)) dance_frames.push_back(t * m.fps);
        clip_bas[i] = beat_align_score(music_frames, dance_frames, sigma);
        clip_pfc[i] = pfc(m, skel);
        clip_fsr[i] = foot_skating_ratio(m, skel, h_contact, v_slide);
    }

    std::vector<std::vector<float>> ref_kin(ref_files.size()), ref_geo(ref_files.size());
#pragma omp parallel for schedule(static)
    for (int i = 0; i < static_cast<int>(ref_files.size()); ++i) {
        const MotionSequence m = read_motion(ref_files[i]);
        ref_kin[i] = kinematic_features(m, skel);
        ref_geo[i] = geometric_features(m, skel);
    }

    const double fid_k = fid(gen_kin, ref_kin);
    const double fid_g = fid(gen_geo, ref_geo);
    const double div_k = diversity(gen_kin);
    const double div_g = diversity(gen_geo);
    double bas = 0.0, mean_pfc = 0.0, mean_fsr = 0.0;
    for (int i = 0; i < n_gen; ++i) {
        bas += clip_bas[i];
        mean_pfc += clip_pfc[i];
        mean_fsr += clip_fsr[i];
    }
    bas /= n_gen;
    mean_pfc /= n_gen;
    mean_fsr /= n_gen;

    std::ofstream report(report_path);
    if (!report) throw DataError("cannot open report: " + report_path);
    report << cfg.echo();
    char buf[64];
    const std::pair<const char*, double> rows[] = {
        {"fid_k", fid_k}, {"fid_g", fid_g}, {"div_k", div_k}, {"div_g", div_g},
        {"bas", bas},     {"pfc", mean_pfc}, {"fsr", mean_fsr}};
    for (const auto& [name, value] : rows) {
        std::snprintf(buf, sizeof buf, "%s=%.9g\n", name, value);
        report << buf;
        std::printf("%s", buf);
    }

    std::ofstream clips(report_path + ".clips.csv");
    clips << cfg.echo();
    clips << "clip,bas,pfc,fsr\n";
    for (int i = 0; i < n_gen; ++i) {
        std::snprintf(buf, sizeof buf, ",%.9g,%.9g,%.9g\n", clip_bas[i], clip_pfc[i],
                      clip_fsr[i]);
        clips << fs::path(gen_files[i]).filename().string() << buf;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    apply_thread_cap();
    CLI::App app{"masked generative dance-motion toolkit"};
    app.require_subcommand(1);

    // gen-data
    auto* gen_data = app.add_subcommand("gen-data", "synthesize a motion/beat corpus");
    std::string gd_out, gd_genres = "breaking,house,locking,popping", gd_config;
    uint64_t gd_seed = 7;
    int gd_clips = 32;
    double gd_seconds = 8.0;
    bool gd_force = false;
    gen_data->add_option("--out", gd_out)->required();
    gen_data->add_option("--seed", gd_seed);
    gen_data->add_option("--genres", gd_genres);
    gen_data->add_option("--clips", gd_clips);
    gen_data->add_option("--seconds", gd_seconds);
    gen_data->add_option("--config", gd_config);
    gen_data->add_flag("--force", gd_force);

    // train
    auto* train = app.add_subcommand("train", "run one progressive training stage");
    std::string tr_stage, tr_config, tr_data, tr_out, tr_resume;
    train->add_option("stage", tr_stage, "tokenizer|t2m|music|pose")->required();
    train->add_option("--config", tr_config);
    train->add_option("--data", tr_data)->required();
    train->add_option("--out", tr_out)->required();
    train->add_option("--resume", tr_resume);

    // generate
    auto* generate = app.add_subcommand("generate", "sample a motion clip");
    std::string g_ckpt, g_beats, g_genre, g_out, g_trace, g_config;
    uint64_t g_seed = 0;
    int g_frames = 160;
    bool g_uncond = false;
    generate->add_option("--checkpoint", g_ckpt)->required();
    generate->add_option("--beats", g_beats);
    generate->add_option("--genre", g_genre);
    generate->add_option("--frames", g_frames);
    generate->add_option("--seed", g_seed);
    generate->add_option("--out", g_out)->required();
    generate->add_option("--trace", g_trace);
    generate->add_option("--config", g_config);
    generate->add_flag("--unconditional", g_uncond);

    // edit
    auto* edit = app.add_subcommand("edit", "spatial or temporal motion editing");
    std::string e_mode, e_ckpt, e_motion, e_constraints, e_ranges, e_genre, e_beats, e_out,
        e_config;
    uint64_t e_seed = 0;
    edit->add_option("--mode", e_mode)->required();
    edit->add_option("--checkpoint", e_ckpt)->required();
    edit->add_option("--motion", e_motion)->required();
    edit->add_option("--constraints", e_constraints);
    edit->add_option("--keep-ranges", e_ranges);
    edit->add_option("--genre", e_genre);
    edit->add_option("--beats", e_beats);
    edit->add_option("--seed", e_seed);
    edit->add_option("--out", e_out)->required();
    edit->add_option("--config", e_config);

    // stitch
    auto* stitch = app.add_subcommand("stitch", "long-form generation from segments");
    std::string s_ckpt, s_spec, s_out, s_config;
    int s_overlap = 4;
    uint64_t s_seed = 0;
    stitch->add_option("--checkpoint", s_ckpt)->required();
    stitch->add_option("--segments", s_spec)->required();
    stitch->add_option("--overlap", s_overlap);
    stitch->add_option("--seed", s_seed);
    stitch->add_option("--out", s_out)->required();
    stitch->add_option("--config", s_config);

    // eval
    auto* eval = app.add_subcommand("eval", "compute the metric battery");
    std::string v_gen, v_ref, v_beats, v_report, v_config;
    eval->add_option("--gen", v_gen)->required();
    eval->add_option("--ref", v_ref)->required();
    eval->add_option("--beats", v_beats)->required();
    eval->add_option("--report", v_report)->required();
    eval->add_option("--config", v_config);

    try {
        app.parse(argc, argv);
        if (gen_data->parsed())
            return run_gen_data(gd_out, gd_seed, gd_genres, gd_clips, gd_seconds, gd_force,
                                gd_config);
        if (train->parsed()) return run_train(tr_stage, tr_config, tr_data, tr_out, tr_resume);
        if (generate->parsed())
            return run_generate(g_ckpt, g_beats, g_genre, g_frames, g_seed, g_out, g_trace,
                                g_uncond, g_config);
        if (edit->parsed())
            return run_edit(e_mode, e_ckpt, e_motion, e_constraints, e_ranges, e_genre,
                            e_beats, e_seed, e_out, e_config);
        if (stitch->parsed())
            return run_stitch(s_ckpt, s_spec, s_overlap, s_seed, s_out, s_config);
        if (eval->parsed()) return run_eval(v_gen, v_ref, v_beats, v_report, v_config);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
