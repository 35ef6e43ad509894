#include "dmsk/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dmsk/backbone.hpp"
#include "dmsk/checkpoint.hpp"
#include "dmsk/errors.hpp"
#include "dmsk/sampler.hpp"
#include "dmsk/tokenizer.hpp"

namespace fs = std::filesystem;

namespace dmsk {

uint64_t stage_mix(uint64_t seed, uint64_t a, uint64_t b) {
    uint64_t h = seed * 0x9e3779b97f4a7c15ull + a * 0xbf58476d1ce4e5b9ull +
                 b * 0x94d049bb133111ebull + 0x2545f4914f6cdd1dull;
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return h;
}

namespace {

constexpr uint64_t kStageTokenizer = 1, kStageT2m = 2, kStageMusic = 3, kStagePose = 4,
                   kStageResidual = 5;

uint64_t stage_id_of(const std::string& stage) {
    if (stage == "tokenizer") return kStageTokenizer;
    if (stage == "t2m") return kStageT2m;
    if (stage == "music") return kStageMusic;
    if (stage == "pose") return kStagePose;
    throw UsageError("unknown training stage: " + stage);
}

void freeze_tokenizer(TokenizerModel& tok) {
    for (Conv1dLayer* l : {&tok.enc1, &tok.enc2, &tok.enc3, &tok.dec1, &tok.dec2,
                           &tok.dec3, &tok.dec4}) {
        l->w.requires_grad = false;
        l->w.grad.reset();
        l->b.requires_grad = false;
        l->b.grad.reset();
    }
    for (Tensor& cb : tok.codebooks) {
        cb.requires_grad = false;
        cb.grad.reset();
    }
}

struct LossLog {
    std::ofstream file;

    LossLog(const std::string& path, const Config& cfg, const std::string& columns) {
        file.open(path);
        if (!file) throw DataError("cannot open loss log: " + path);
        file << cfg.echo();
        file << columns << "\n";
    }
    void row(int64_t step, std::initializer_list<double> values) {
        char buf[64];
        file << step;
        for (double v : values) {
            std::snprintf(buf, sizeof buf, ",%.9g", v);
            file << buf;
        }
        file << "\n";
    }
};

struct TrainState {
    uint64_t stage_id = 0;
    int64_t step = 0;
    uint64_t seed = 0;
};

TrainState read_state(const Checkpoint& ck) {
    TrainState s;
    if (const CheckpointSection* sec = ck.find("train_state")) {
        s.stage_id = static_cast<uint64_t>(sec->get_value("stage"));
        s.step = static_cast<int64_t>(sec->get_value("step"));
        s.seed = static_cast<uint64_t>(sec->get_value("seed"));
    }
    return s;
}

void write_state(Checkpoint& ck, const TrainState& s) {
    CheckpointSection& sec = ck.add("train_state");
    sec.put_values("stage", {static_cast<float>(s.stage_id)});
    sec.put_values("step", {static_cast<float>(s.step)});
    sec.put_values("seed", {static_cast<float>(s.seed)});
}

// Residual-layer code sum of a grid (layers >= 1 only), as constant values.
Tensor residual_codes_const(const TokenizerModel& tok, const TokenGrid& grid) {
    Tensor out = Tensor::zeros({grid.length, tok.code_dim});
    for (int q = 1; q < grid.layers; ++q)
        for (int i = 0; i < grid.length; ++i) {
            const float* code = tok.codebooks[q].ptr() +
                                static_cast<size_t>(grid.idx(q, i)) * tok.code_dim;
            for (int j = 0; j < tok.code_dim; ++j) out.at(i, j) += code[j];
        }
    return out;
}

std::vector<int> base_tokens_of(const TokenGrid& grid) {
    std::vector<int> t(grid.length);
    for (int i = 0; i < grid.length; ++i) t[i] = grid.idx(0, i);
    return t;
}

}  // namespace

void Corpus::split(float holdout_fraction) {
    train_indices.clear();
    holdout_indices.clear();
    // count clips per genre
    std::vector<int> per_genre(genre_names.size(), 0);
    for (const CorpusClip& c : clips) ++per_genre[c.genre];
    for (size_t i = 0; i < clips.size(); ++i) {
        const int count = per_genre[clips[i].genre];
        const int holdout = std::max(1, static_cast<int>(std::lround(count * holdout_fraction)));
        if (clips[i].index >= count - holdout && count > 1)
            holdout_indices.push_back(static_cast<int>(i));
        else
            train_indices.push_back(static_cast<int>(i));
    }
}

void save_corpus(const std::string& dir, const std::vector<CorpusClip>& clips,
                 const Config& cfg, bool force) {
    const fs::path root(dir);
    if (fs::exists(root / "manifest.csv") && !force)
        throw DataError("output directory already holds a corpus (use --force): " + dir);
    fs::create_directories(root);

    std::ofstream manifest(root / "manifest.csv");
    if (!manifest) throw DataError("cannot write manifest in " + dir);
    manifest << cfg.echo();
    manifest << "id,genre,genre_id,index,tempo,frames,fps,motion,beats\n";
    char name[64];
    for (size_t i = 0; i < clips.size(); ++i) {
        const CorpusClip& c = clips[i];
        std::snprintf(name, sizeof name, "motion_%05zu.dmot", i);
        const std::string motion_file = name;
        std::snprintf(name, sizeof name, "beats_%05zu.dbea", i);
        const std::string beats_file = name;
        write_motion((root / motion_file).string(), c.motion);
        write_beats((root / beats_file).string(), c.beats);
        char tempo[32];
        std::snprintf(tempo, sizeof tempo, "%.6g", static_cast<double>(c.beats.tempo));
        manifest << i << "," << c.genre_name << "," << c.genre << "," << c.index << ","
                 << tempo << "," << c.motion.frames << "," << c.motion.fps << ","
                 << motion_file << "," << beats_file << "\n";
    }
}

Corpus load_corpus(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream manifest(root / "manifest.csv");
    if (!manifest) throw DataError("no manifest.csv in " + dir);
    Corpus corpus;
    std::string line;
    bool header_seen = false;
    while (std::getline(manifest, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            header_seen = true;  // column header
            continue;
        }
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 9) throw DataError("malformed manifest row: " + line);
        CorpusClip clip;
        clip.genre_name = fields[1];
        clip.genre = std::stoi(fields[2]);
        clip.index = std::stoi(fields[3]);
        clip.motion = read_motion((root / fields[7]).string());
        clip.beats = read_beats((root / fields[8]).string());
        while (static_cast<int>(corpus.genre_names.size()) <= clip.genre)
            corpus.genre_names.push_back("");
        corpus.genre_names[clip.genre] = clip.genre_name;
        corpus.fps = clip.motion.fps;
        corpus.clips.push_back(std::move(clip));
    }
    if (corpus.clips.empty()) throw DataError("empty corpus in " + dir);
    return corpus;
}

PoseConstraint sample_training_constraint(const MotionSequence& motion, const Skeleton& skel,
                                          Rng& rng) {
    const int J = skel.joint_count;
    const int N = motion.frames;
    PoseConstraint c;
    c.frames = N;
    c.joints = J;
    c.positions.assign(static_cast<size_t>(N) * J * 3, 0.0f);
    c.validity.assign(static_cast<size_t>(N) * J, 0);

    const int joint_count = 1 + rng.uniform_int(4);  // 1..4
    std::vector<int> joints;
    while (static_cast<int>(joints.size()) < joint_count) {
        const int j = rng.uniform_int(J);
        if (std::find(joints.begin(), joints.end(), j) == joints.end()) joints.push_back(j);
    }
    const float frac = rng.uniform(0.1f, 0.5f);
    int frame_count = std::max(1, static_cast<int>(std::lround(frac * N)));
    std::vector<int> order(N);
    for (int i = 0; i < N; ++i) order[i] = i;
    for (int i = N - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);

    const std::vector<float> fk = fk_sequence(motion, skel, false);
    for (int f = 0; f < frame_count; ++f) {
        const int t = order[f];
        for (int j : joints) {
            c.validity[static_cast<size_t>(t) * J + j] = 1;
            for (int k = 0; k < 3; ++k)
                c.pos(t, j, k) = fk[(static_cast<size_t>(t) * J + j) * 3 + k];
        }
    }
    return c;
}

float eval_roundtrip_mpjpe(const ModelSet& models, const Corpus& corpus, bool holdout_only) {
    const std::vector<int>& idx = holdout_only ? corpus.holdout_indices : corpus.train_indices;
    if (idx.empty()) throw DataError("eval_roundtrip_mpjpe: empty split");
    const int J = desk_skeleton().joint_count;
    double total = 0.0;
    int64_t count = 0;
    for (int ci : idx) {
        const MotionSequence& m = corpus.clips[ci].motion;
        const TokenGrid grid = models.tokenizer.encode(m);
        const MotionSequence r = models.tokenizer.decode(grid, m.frames);
        for (int t = 0; t < m.frames; ++t)
            for (int j = 1; j < J; ++j) {
                double sq = 0.0;
                for (int k = 0; k < 3; ++k) {
                    const double d = static_cast<double>(m.at(t, 3 + (j - 1) * 3 + k)) -
                                     r.at(t, 3 + (j - 1) * 3 + k);
                    sq += d * d;
                }
                total += std::sqrt(sq);
                ++count;
            }
    }
    return static_cast<float>(total / static_cast<double>(count));
}

float eval_masked_ce(const ModelSet& models, const Corpus& corpus, uint64_t seed,
                     bool holdout_only) {
    if (!models.t2m) throw CheckpointError("eval_masked_ce: missing t2m");
    const std::vector<int>& idx = holdout_only ? corpus.holdout_indices : corpus.train_indices;
    if (idx.empty()) throw DataError("eval_masked_ce: empty split");
    double total = 0.0;
    int count = 0;
    for (int ci : idx) {
        Rng rng(stage_mix(seed, 77, static_cast<uint64_t>(ci)));
        const TokenGrid grid = models.tokenizer.encode(corpus.clips[ci].motion);
        const std::vector<int> targets = base_tokens_of(grid);
        const MaskOutcome mo = training_mask(targets, rng, models.t2m->mask_id());
        const Tensor logits = models.t2m->forward_logits(mo.corrupted, corpus.clips[ci].genre);
        const Tensor loss = t2m_loss(logits, targets, mo.masked, 0.0f);
        total += loss.scalar();
        ++count;
    }
    return static_cast<float>(total / count);
}

namespace {

struct StageContext {
    TrainOptions opt;
    Corpus corpus;
    Checkpoint in_ck;
    TrainState state;
    uint64_t seed = 0;
};

void run_tokenizer_stage(StageContext& ctx) {
    const Config& cfg = ctx.opt.cfg;
    const int64_t steps = cfg.i("train.steps_tokenizer");
    const int batch = cfg.i("train.batch");
    const float beta = cfg.f("tokenizer.beta");
    const int reset_window = cfg.i("tokenizer.reset_window");

    TokenizerModel tok = [&] {
        if (ctx.state.stage_id == kStageTokenizer && ctx.in_ck.has("tokenizer"))
            return TokenizerModel::from_section(*ctx.in_ck.find("tokenizer"));
        Rng init_rng(stage_mix(ctx.seed, kStageTokenizer, 0xabcdef));
        TokenizerModel t =
            TokenizerModel::init(cfg, ctx.corpus.clips[0].motion.dim, init_rng);
        // data-driven codebook init: nearest real latents quantize well from
        // the first step and keep residual norms contracting
        Rng data_rng(stage_mix(ctx.seed, kStageTokenizer, 0x123));
        std::vector<Tensor> latents;
        for (int i = 0; i < 8 && i < static_cast<int>(ctx.corpus.train_indices.size()); ++i)
            latents.push_back(t.encode_latents(
                motion_to_tensor(ctx.corpus.clips[ctx.corpus.train_indices[i]].motion)));
        if (!latents.empty()) {
            Tensor pool = ops::concat_rows(latents);
            for (size_t q = 0; q < t.codebooks.size(); ++q) {
                for (int l = 0; l < t.codebook_size; ++l) {
                    const int pick = data_rng.uniform_int(pool.rows());
                    for (int j = 0; j < t.code_dim; ++j)
                        (*t.codebooks[q].data)[static_cast<size_t>(l) * t.code_dim + j] =
                            q == 0 ? pool.at(pick, j) + 0.01f * data_rng.normal()
                                   : 0.02f * data_rng.normal();
                }
            }
        }
        return t;
    }();

    AdamW opt(tok.params(), cfg.f("train.weight_decay"));
    if (ctx.state.stage_id == kStageTokenizer && ctx.in_ck.has("opt.tokenizer"))
        opt.load_state_blob(ctx.in_ck.find("opt.tokenizer")->find("state")->data);
    const int64_t start = ctx.state.stage_id == kStageTokenizer ? ctx.state.step : 0;

    LossLog log(ctx.opt.log_path, cfg, "step,loss,lr,perplexity0");
    const int ntrain = static_cast<int>(ctx.corpus.train_indices.size());

    for (int64_t step = start; step < steps; ++step) {
        Rng rng(stage_mix(ctx.seed, kStageTokenizer, static_cast<uint64_t>(step)));
        const float lr = warmup_lr(step, cfg.f("train.lr"), cfg.i("train.warmup"));
        Tape tape;
        Tensor loss;
        Tensor last_latents;
        for (int b = 0; b < batch; ++b) {
            const CorpusClip& clip =
                ctx.corpus.clips[ctx.corpus.train_indices[rng.uniform_int(ntrain)]];
            Tensor feats = motion_to_tensor(clip.motion);
            Tensor z = tok.encode_latents(feats);
            QuantizeResult qr = quantize(z, tok.codebooks);
            tok.count_usage(qr.grid);
            Tensor z_bar;
            for (int q = 0; q < qr.grid.layers; ++q) {
                std::vector<int> ids(qr.grid.length);
                for (int i = 0; i < qr.grid.length; ++i) ids[i] = qr.grid.idx(q, i);
                Tensor rows = ops::embedding(tok.codebooks[q], ids);
                z_bar = z_bar.data ? ops::add(z_bar, rows) : rows;
            }
            Tensor delta = Tensor::zeros(z.shape);
            for (int i = 0; i < z.numel(); ++i)
                delta.at(i) = qr.quantized.at(i) - z.at(i);
            Tensor st = ops::add(z, delta);
            Tensor m_hat = tok.decode_latents(st);
            Tensor lb = tokenizer_loss(feats, m_hat, z, z_bar, beta);
            loss = loss.data ? ops::add(loss, lb) : lb;
            last_latents = z;
        }
        loss = ops::scale(loss, 1.0f / batch);
        tape.backward(loss);
        opt.step(lr);
        opt.zero_grad();

        double perp = 0.0;
        {
            int64_t used = 0;
            for (int64_t u : tok.usage[0]) used += u;
            if (used > 0) {
                double h = 0.0;
                for (int64_t u : tok.usage[0])
                    if (u > 0) {
                        const double p = static_cast<double>(u) / used;
                        h -= p * std::log(p);
                    }
                perp = std::exp(h);
            }
        }
        if (reset_window > 0 && (step + 1) % reset_window == 0 && last_latents.data)
            tok.codebook_reset(last_latents.detached(), rng);

        log.row(step, {loss.scalar(), lr, perp});
    }

    tok.trained = true;
    Checkpoint out;
    tok.to_section(out.add("tokenizer"));
    CheckpointSection& osec = out.add("opt.tokenizer");
    osec.put_values("state", opt.state_blob());
    write_state(out, {kStageTokenizer, steps, ctx.seed});
    out.save(ctx.opt.out_path);
}

void run_t2m_stage(StageContext& ctx) {
    const Config& cfg = ctx.opt.cfg;
    if (!ctx.in_ck.has("tokenizer"))
        throw CheckpointError("stage t2m requires a tokenizer checkpoint (missing prerequisite)");
    const int64_t steps = cfg.i("train.steps_t2m");
    const int batch = cfg.i("train.batch");
    const float lambda_unmask = cfg.f("loss.lambda_unmask");
    const float cond_dropout = cfg.f("train.cond_dropout");
    const float mask_floor = cfg.f("train.mask_floor");

    TokenizerModel tok = TokenizerModel::from_section(*ctx.in_ck.find("tokenizer"));
    freeze_tokenizer(tok);

    MaskedTransformer net = [&] {
        if (ctx.state.stage_id == kStageT2m && ctx.in_ck.has("t2m"))
            return MaskedTransformer::from_section(*ctx.in_ck.find("t2m"));
        Rng init_rng(stage_mix(ctx.seed, kStageT2m, 0xabcdef));
        return MaskedTransformer::init(tok.codebook_size,
                                       static_cast<int>(ctx.corpus.genre_names.size()),
                                       cfg.i("model.width"), cfg.i("model.layers"),
                                       cfg.i("model.heads"), cfg.i("model.ffn"),
                                       cfg.i("model.max_tokens"), init_rng);
    }();

    AdamW opt(net.params(), cfg.f("train.weight_decay"));
    if (ctx.state.stage_id == kStageT2m && ctx.in_ck.has("opt.t2m"))
        opt.load_state_blob(ctx.in_ck.find("opt.t2m")->find("state")->data);
    const int64_t start = ctx.state.stage_id == kStageT2m ? ctx.state.step : 0;

    // token grids are fixed once the tokenizer is frozen
    std::vector<TokenGrid> grids;
    grids.reserve(ctx.corpus.clips.size());
    for (const CorpusClip& c : ctx.corpus.clips) grids.push_back(tok.encode(c.motion));

    LossLog log(ctx.opt.log_path, cfg, "step,loss,lr");
    const int ntrain = static_cast<int>(ctx.corpus.train_indices.size());

    for (int64_t step = start; step < steps; ++step) {
        Rng rng(stage_mix(ctx.seed, kStageT2m, static_cast<uint64_t>(step)));
        const float lr = warmup_lr(step, cfg.f("train.lr"), cfg.i("train.warmup"));
        Tape tape;
        Tensor loss;
        for (int b = 0; b < batch; ++b) {
            const int ci = ctx.corpus.train_indices[rng.uniform_int(ntrain)];
            const std::vector<int> targets = base_tokens_of(grids[ci]);
            const MaskOutcome mo = training_mask(targets, rng, net.mask_id(), mask_floor);
            const int genre =
                rng.uniform() < cond_dropout ? -1 : ctx.corpus.clips[ci].genre;
            Tensor logits = net.forward_logits(mo.corrupted, genre);
            Tensor lb = t2m_loss(logits, targets, mo.masked, lambda_unmask);
            loss = loss.data ? ops::add(loss, lb) : lb;
        }
        loss = ops::scale(loss, 1.0f / batch);
        tape.backward(loss);
        opt.step(lr);
        opt.zero_grad();
        log.row(step, {loss.scalar(), lr});
    }

    Checkpoint out;
    tok.to_section(out.add("tokenizer"));
    {
        CheckpointSection& sec = out.add("t2m");
        net.to_section(sec);
        for (size_t i = 0; i < ctx.corpus.genre_names.size(); ++i)
            sec.put_values("genre:" + ctx.corpus.genre_names[i], {static_cast<float>(i)});
    }
    CheckpointSection& osec = out.add("opt.t2m");
    osec.put_values("state", opt.state_blob());
    write_state(out, {kStageT2m, steps, ctx.seed});
    out.save(ctx.opt.out_path);
}

void run_music_stage(StageContext& ctx) {
    const Config& cfg = ctx.opt.cfg;
    if (!ctx.in_ck.has("tokenizer") || !ctx.in_ck.has("t2m"))
        throw CheckpointError("stage music requires a t2m checkpoint (missing prerequisite)");
    const int64_t adapter_steps = cfg.i("train.steps_music");
    const int64_t residual_steps = cfg.i("train.steps_residual");
    const int64_t steps = adapter_steps + residual_steps;
    const int batch = cfg.i("train.batch");
    const KinematicLossWeights weights = KinematicLossWeights::from_config(cfg);
    const float cond_dropout = cfg.f("train.cond_dropout");
    const float mask_floor = cfg.f("train.mask_floor");
    const float gumbel_temp = cfg.f("train.gumbel_temperature");
    const Skeleton skel = desk_skeleton();

    TokenizerModel tok = TokenizerModel::from_section(*ctx.in_ck.find("tokenizer"));
    freeze_tokenizer(tok);
    MaskedTransformer backbone = MaskedTransformer::from_section(*ctx.in_ck.find("t2m"));
    backbone.freeze();

    const bool resuming = ctx.state.stage_id == kStageMusic;
    AdapterTower tower = [&] {
        if (resuming && ctx.in_ck.has("music_adapter"))
            return AdapterTower::from_section(*ctx.in_ck.find("music_adapter"));
        Rng init_rng(stage_mix(ctx.seed, kStageMusic, 0xabcdef));
        return AdapterTower::init(backbone, kMusicFeatureDim, init_rng);
    }();
    ResidualHead resid = [&] {
        if (resuming && ctx.in_ck.has("residual_head"))
            return ResidualHead::from_section(*ctx.in_ck.find("residual_head"));
        Rng init_rng(stage_mix(ctx.seed, kStageResidual, 0xabcdef));
        return ResidualHead::init(tok.codebook_size,
                                  static_cast<int>(ctx.corpus.genre_names.size()),
                                  tok.quant_layers, cfg, init_rng);
    }();

    AdamW opt_tower(tower.params(), cfg.f("train.weight_decay"));
    AdamW opt_resid(resid.params(), cfg.f("train.weight_decay"));
    if (resuming && ctx.in_ck.has("opt.music"))
        opt_tower.load_state_blob(ctx.in_ck.find("opt.music")->find("state")->data);
    if (resuming && ctx.in_ck.has("opt.residual"))
        opt_resid.load_state_blob(ctx.in_ck.find("opt.residual")->find("state")->data);
    const int64_t start = resuming ? ctx.state.step : 0;

    std::vector<TokenGrid> grids;
    std::vector<Tensor> music_conds;
    for (const CorpusClip& c : ctx.corpus.clips) {
        grids.push_back(tok.encode(c.motion));
        music_conds.push_back(
            music_condition(c.beats, grids.back().length, tok.downsample));
    }

    LossLog log(ctx.opt.log_path, cfg, "step,loss,lr");
    const int ntrain = static_cast<int>(ctx.corpus.train_indices.size());

    for (int64_t step = start; step < steps; ++step) {
        const bool residual_phase = step >= adapter_steps;
        Rng rng(stage_mix(ctx.seed, residual_phase ? kStageResidual : kStageMusic,
                          static_cast<uint64_t>(step)));
        Tape tape;
        Tensor loss;
        if (!residual_phase) {
            const float lr = warmup_lr(step, cfg.f("train.lr"), cfg.i("train.warmup"));
            for (int b = 0; b < batch; ++b) {
                const int ci = ctx.corpus.train_indices[rng.uniform_int(ntrain)];
                const std::vector<int> targets = base_tokens_of(grids[ci]);
                const MaskOutcome mo =
                    training_mask(targets, rng, backbone.mask_id(), mask_floor);
                const int genre =
                    rng.uniform() < cond_dropout ? -1 : ctx.corpus.clips[ci].genre;
                Tensor logits =
                    attach_forward(backbone, tower, mo.corrupted, genre, music_conds[ci]);
                ops::GumbelSample gs = ops::gumbel_softmax_st(logits, gumbel_temp, rng);
                Tensor latents = ops::add(
                    ops::matmul(gs.hard, tok.codebooks[0].detached()),
                    residual_codes_const(tok, grids[ci]));
                Tensor m_hat = tok.decode_latents(latents);
                Tensor gt = motion_to_tensor(ctx.corpus.clips[ci].motion);
                Tensor lb = music_adapter_loss(logits, targets, mo.masked, m_hat, gt, skel,
                                               tok.fps, weights);
                loss = loss.data ? ops::add(loss, lb) : lb;
            }
            loss = ops::scale(loss, 1.0f / batch);
            tape.backward(loss);
            opt_tower.step(lr);
            opt_tower.zero_grad();
            log.row(step, {loss.scalar(), lr});
        } else {
            const int64_t rstep = step - adapter_steps;
            const float lr = warmup_lr(rstep, cfg.f("train.lr"), cfg.i("train.warmup"));
            for (int b = 0; b < batch; ++b) {
                const int ci = ctx.corpus.train_indices[rng.uniform_int(ntrain)];
                const TokenGrid& grid = grids[ci];
                if (grid.layers < 2) continue;
                const std::vector<int> base = base_tokens_of(grid);
                std::vector<int> targets(grid.length);
                for (int i = 0; i < grid.length; ++i) targets[i] = grid.idx(1, i);
                const int genre =
                    rng.uniform() < cond_dropout ? -1 : ctx.corpus.clips[ci].genre;
                Tensor logits = resid.forward_logits(base, genre, music_conds[ci], 1);
                Tensor lb = t2m_loss(logits, targets, std::vector<uint8_t>(grid.length, 0),
                                     1.0f);
                loss = loss.data ? ops::add(loss, lb) : lb;
            }
            if (loss.data) {
                loss = ops::scale(loss, 1.0f / batch);
                tape.backward(loss);
                opt_resid.step(lr);
                opt_resid.zero_grad();
                log.row(step, {loss.scalar(), lr});
            }
        }
    }

    Checkpoint out;
    tok.to_section(out.add("tokenizer"));
    {
        CheckpointSection& sec = out.add("t2m");
        backbone.to_section(sec);
        for (size_t i = 0; i < ctx.corpus.genre_names.size(); ++i)
            sec.put_values("genre:" + ctx.corpus.genre_names[i], {static_cast<float>(i)});
    }
    tower.to_section(out.add("music_adapter"));
    resid.to_section(out.add("residual_head"));
    if (ctx.in_ck.has("pose_adapter")) {
        const CheckpointSection* p = ctx.in_ck.find("pose_adapter");
        out.sections.push_back(*p);
    }
    out.add("opt.music").put_values("state", opt_tower.state_blob());
    out.add("opt.residual").put_values("state", opt_resid.state_blob());
    write_state(out, {kStageMusic, steps, ctx.seed});
    out.save(ctx.opt.out_path);
}

void run_pose_stage(StageContext& ctx) {
    const Config& cfg = ctx.opt.cfg;
    if (!ctx.in_ck.has("tokenizer") || !ctx.in_ck.has("t2m"))
        throw CheckpointError("stage pose requires a t2m checkpoint (missing prerequisite)");
    const int64_t steps = cfg.i("train.steps_pose");
    const int batch = cfg.i("train.batch");
    const KinematicLossWeights weights = KinematicLossWeights::from_config(cfg);
    const float cond_dropout = cfg.f("train.cond_dropout");
    const float mask_floor = cfg.f("train.mask_floor");
    const float gumbel_temp = cfg.f("train.gumbel_temperature");
    const Skeleton skel = desk_skeleton();

    TokenizerModel tok = TokenizerModel::from_section(*ctx.in_ck.find("tokenizer"));
    freeze_tokenizer(tok);
    MaskedTransformer backbone = MaskedTransformer::from_section(*ctx.in_ck.find("t2m"));
    backbone.freeze();

    const bool resuming = ctx.state.stage_id == kStagePose;
    const int cond_dim = skel.joint_count * 3 + skel.joint_count;
    AdapterTower tower = [&] {
        if (resuming && ctx.in_ck.has("pose_adapter"))
            return AdapterTower::from_section(*ctx.in_ck.find("pose_adapter"));
        Rng init_rng(stage_mix(ctx.seed, kStagePose, 0xabcdef));
        return AdapterTower::init(backbone, cond_dim, init_rng);
    }();

    AdamW opt(tower.params(), cfg.f("train.weight_decay"));
    if (resuming && ctx.in_ck.has("opt.pose"))
        opt.load_state_blob(ctx.in_ck.find("opt.pose")->find("state")->data);
    const int64_t start = resuming ? ctx.state.step : 0;

    std::vector<TokenGrid> grids;
    for (const CorpusClip& c : ctx.corpus.clips) grids.push_back(tok.encode(c.motion));

    LossLog log(ctx.opt.log_path, cfg, "step,loss,lr");
    const int ntrain = static_cast<int>(ctx.corpus.train_indices.size());

    for (int64_t step = start; step < steps; ++step) {
        Rng rng(stage_mix(ctx.seed, kStagePose, static_cast<uint64_t>(step)));
        const float lr = warmup_lr(step, cfg.f("train.lr"), cfg.i("train.warmup"));
        Tape tape;
        Tensor loss;
        for (int b = 0; b < batch; ++b) {
            const int ci = ctx.corpus.train_indices[rng.uniform_int(ntrain)];
            const CorpusClip& clip = ctx.corpus.clips[ci];
            const TokenGrid& grid = grids[ci];
            const std::vector<int> targets = base_tokens_of(grid);
            const MaskOutcome mo = training_mask(targets, rng, backbone.mask_id(), mask_floor);
            const int genre = rng.uniform() < cond_dropout ? -1 : clip.genre;
            PoseConstraint constraint = sample_training_constraint(clip.motion, skel, rng);
            Tensor cond = pose_condition(constraint, grid.length, tok.downsample);
            Tensor logits = attach_forward(backbone, tower, mo.corrupted, genre, cond);
            ops::GumbelSample gs = ops::gumbel_softmax_st(logits, gumbel_temp, rng);
            Tensor latents = ops::add(ops::matmul(gs.hard, tok.codebooks[0].detached()),
                                      residual_codes_const(tok, grid));
            Tensor m_hat = tok.decode_latents(latents);
            Tensor p_hat = fk_positions_tensor(m_hat, skel, tok.fps, false);
            if (p_hat.rows() > constraint.frames)
                p_hat = ops::slice_rows(p_hat, 0, constraint.frames);
            Tensor lb = pose_adapter_loss(logits, targets, mo.masked, constraint, p_hat,
                                          weights);
            loss = loss.data ? ops::add(loss, lb) : lb;
        }
        loss = ops::scale(loss, 1.0f / batch);
        tape.backward(loss);
        opt.step(lr);
        opt.zero_grad();
        log.row(step, {loss.scalar(), lr});
    }

    Checkpoint out;
    tok.to_section(out.add("tokenizer"));
    {
        CheckpointSection& sec = out.add("t2m");
        backbone.to_section(sec);
        for (size_t i = 0; i < ctx.corpus.genre_names.size(); ++i)
            sec.put_values("genre:" + ctx.corpus.genre_names[i], {static_cast<float>(i)});
    }
    if (ctx.in_ck.has("music_adapter"))
        out.sections.push_back(*ctx.in_ck.find("music_adapter"));
    if (ctx.in_ck.has("residual_head"))
        out.sections.push_back(*ctx.in_ck.find("residual_head"));
    tower.to_section(out.add("pose_adapter"));
    out.add("opt.pose").put_values("state", opt.state_blob());
    write_state(out, {kStagePose, steps, ctx.seed});
    out.save(ctx.opt.out_path);
}

}  // namespace

void train_stage(const TrainOptions& opt_in) {
    StageContext ctx;
    ctx.opt = opt_in;
    if (ctx.opt.log_path.empty()) ctx.opt.log_path = ctx.opt.out_path + ".log.csv";
    const uint64_t stage_id = stage_id_of(ctx.opt.stage);

    ctx.corpus = load_corpus(ctx.opt.data_dir);
    ctx.corpus.split(ctx.opt.cfg.f("train.holdout_fraction"));
    ctx.seed = static_cast<uint64_t>(std::strtoull(ctx.opt.cfg.s("seed").c_str(), nullptr, 10));

    if (!ctx.opt.resume_path.empty()) {
        ctx.in_ck = Checkpoint::load(ctx.opt.resume_path);
        ctx.state = read_state(ctx.in_ck);
        if (ctx.state.stage_id == stage_id) ctx.seed = ctx.state.seed;
    } else if (stage_id != kStageTokenizer) {
        throw CheckpointError("stage " + ctx.opt.stage +
                              " requires --resume with the previous stage's checkpoint");
    }

    switch (stage_id) {
        case kStageTokenizer: run_tokenizer_stage(ctx); break;
        case kStageT2m: run_t2m_stage(ctx); break;
        case kStageMusic: run_music_stage(ctx); break;
        case kStagePose: run_pose_stage(ctx); break;
        default: throw UsageError("unknown stage");
    }
}

}  // namespace dmsk
