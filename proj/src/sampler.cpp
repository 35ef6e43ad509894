#include "dmsk/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "dmsk/errors.hpp"
#include "dmsk/kernels.hpp"
#include "dmsk/metrics.hpp"

namespace dmsk {

namespace {

int categorical_sample(const float* probs, int k, Rng& rng) {
    const float u = rng.uniform();
    float acc = 0.0f;
    for (int i = 0; i < k; ++i) {
        acc += probs[i];
        if (u < acc) return i;
    }
    return k - 1;
}

int argmax_row(const float* row, int k) {
    int best = 0;
    for (int i = 1; i < k; ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

// Fills layer >= 1 tokens for the given positions, one pass per layer.
void fill_residual_layers(const ModelSet& models, TokenGrid& grid, int genre,
                          const Tensor& music_cond, const std::vector<uint8_t>& fill,
                          float temperature, Rng& rng) {
    if (!models.residual || grid.layers < 2) return;
    const int n = grid.length;
    std::vector<int> base(n);
    for (int i = 0; i < n; ++i) base[i] = grid.idx(0, i);
    for (int q = 1; q < grid.layers; ++q) {
        const Tensor logits = models.residual->forward_logits(base, genre, music_cond, q);
        const int K = logits.cols();
        if (temperature > 1e-6f) {
            std::vector<float> scaled(static_cast<size_t>(n) * K);
            for (int i = 0; i < n * K; ++i) scaled[i] = logits.at(i) / temperature;
            std::vector<float> probs(scaled.size());
            kernels::softmax_rows(scaled.data(), probs.data(), n, K);
            for (int i = 0; i < n; ++i)
                if (fill[i])
                    grid.idx(q, i) =
                        categorical_sample(probs.data() + static_cast<size_t>(i) * K, K, rng);
        } else {
            for (int i = 0; i < n; ++i)
                if (fill[i])
                    grid.idx(q, i) = argmax_row(logits.ptr() + static_cast<size_t>(i) * K, K);
        }
    }
}

float discrete_discrepancy(const ModelSet& models, const TokenGrid& grid,
                           const PoseConstraint& constraint) {
    MotionSequence m = models.tokenizer.decode(grid, constraint.frames);
    return joint_distance(constraint, m, desk_skeleton());
}

}  // namespace

CfgMode cfg_mode_from_string(const std::string& s) {
    if (s == "delta") return CfgMode::kDelta;
    if (s == "linear") return CfgMode::kLinear;
    throw DataError("unknown cfg mode: " + s);
}

Tensor cfg_fuse(const Tensor& l_uncond, const Tensor* l_t, const Tensor* l_a,
                const Tensor* l_p, float w_u, float w_t, float w_a, float w_p,
                CfgMode mode) {
    const Tensor* mods[3] = {l_t, l_a, l_p};
    const double w[3] = {w_t, w_a, w_p};
    for (const Tensor* m : mods)
        if (m && m->shape != l_uncond.shape) throw DimensionError("cfg_fuse: shape mismatch");

    double coef_u;
    if (mode == CfgMode::kDelta) {
        double wsum = 0.0;
        for (int i = 0; i < 3; ++i)
            if (mods[i]) wsum += w[i];
        coef_u = 1.0 - wsum;
    } else {
        coef_u = 1.0 - static_cast<double>(w_u);
    }

    Tensor out = Tensor::zeros(l_uncond.shape);
    const int n = l_uncond.numel();
    for (int i = 0; i < n; ++i) {
        double v = coef_u * static_cast<double>(l_uncond.at(i));
        for (int m = 0; m < 3; ++m)
            if (mods[m]) v += w[m] * static_cast<double>(mods[m]->at(i));
        out.at(i) = static_cast<float>(v);
    }
    return out;
}

SampleSettings SampleSettings::from_config(const Config& cfg) {
    SampleSettings s;
    s.steps = cfg.i("sample.steps");
    s.temperature = cfg.f("sample.temperature");
    s.residual_temperature = cfg.f("sample.residual_temperature");
    s.mode = cfg_mode_from_string(cfg.s("sample.cfg_mode"));
    return s;
}

void DecodeTrace::write_csv(const std::string& path, const std::string& header) const {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open trace file: " + path);
    f << header;
    f << "step,position,confidence,committed\n";
    char buf[64];
    for (const DecodeStep& s : steps)
        for (size_t p = 0; p < s.confidence.size(); ++p) {
            std::snprintf(buf, sizeof buf, "%d,%zu,%.9g,%d\n", s.step, p,
                          static_cast<double>(s.confidence[p]), s.committed[p] ? 1 : 0);
            f << buf;
        }
}

TokenGrid parallel_decode(const ModelSet& models, const GuidanceBundle& bundle, int length,
                          const SampleSettings& settings, Rng& rng, DecodeTrace* trace) {
    if (length < 1) throw ParameterError("parallel_decode: length must be >= 1");
    TokenGrid grid = TokenGrid::empty(length, models.tokenizer.quant_layers);
    std::fill(grid.mask.begin(), grid.mask.end(), 1);
    return decode_with_grid(models, bundle, grid, settings, rng, trace);
}

TokenGrid decode_with_grid(const ModelSet& models, const GuidanceBundle& bundle,
                           const TokenGrid& initial, const SampleSettings& settings,
                           Rng& rng, DecodeTrace* trace) {
    bundle.check();
    if (!models.t2m) throw CheckpointError("decoding requires a trained t2m section");
    if (settings.steps < 1) throw ParameterError("decode: steps must be >= 1");
    const MaskedTransformer& net = *models.t2m;
    const int n = initial.length;

    TokenGrid grid = initial;
    const std::vector<uint8_t> to_fill = initial.mask;
    int L = 0;
    for (uint8_t m : to_fill) L += m != 0;

    const bool use_music = bundle.music.has_value() && models.music.has_value();
    const bool use_pose = bundle.pose.has_value() && models.pose.has_value();
    Tensor music_cond, pose_cond;
    if (use_music || models.residual)
        music_cond = bundle.music
                         ? music_condition(*bundle.music, n, models.tokenizer.downsample)
                         : Tensor::zeros({n, kMusicFeatureDim});
    if (use_pose)
        pose_cond = pose_condition(*bundle.pose, n, models.tokenizer.downsample);

    std::vector<float> conf_state(n, 1.0f);
    std::vector<uint8_t> committed(n, 1);
    for (int i = 0; i < n; ++i) committed[i] = to_fill[i] ? 0 : 1;

    const int s_total = settings.steps;
    for (int t = 1; t <= s_total && L > 0; ++t) {
        std::vector<int> masked_pos;
        for (int i = 0; i < n; ++i)
            if (!committed[i]) masked_pos.push_back(i);
        if (masked_pos.empty()) break;

        std::vector<int> tokens(n);
        for (int i = 0; i < n; ++i)
            tokens[i] = committed[i] ? grid.idx(0, i) : net.mask_id();

        const Tensor l_uncond = net.forward_logits(tokens, -1);
        Tensor l_t, l_a, l_p;
        if (bundle.genre >= 0) l_t = net.forward_logits(tokens, bundle.genre);
        if (use_music) l_a = attach_forward(net, *models.music, tokens, -1, music_cond);
        if (use_pose) l_p = attach_forward(net, *models.pose, tokens, -1, pose_cond);

        const Tensor fused =
            cfg_fuse(l_uncond, l_t.data ? &l_t : nullptr, l_a.data ? &l_a : nullptr,
                     l_p.data ? &l_p : nullptr, bundle.w_u, bundle.w_t, bundle.w_a,
                     bundle.w_p, settings.mode);

        const int K = fused.cols();
        std::vector<float> probs(static_cast<size_t>(n) * K);
        {
            std::vector<float> scaled(probs.size());
            const float inv_t = 1.0f / std::max(settings.temperature, 1e-6f);
            for (size_t i = 0; i < scaled.size(); ++i) scaled[i] = fused.at(static_cast<int>(i)) * inv_t;
            kernels::softmax_rows(scaled.data(), probs.data(), n, K);
        }

        struct Draw {
            int pos;
            int token;
            float conf;
        };
        std::vector<Draw> draws;
        draws.reserve(masked_pos.size());
        for (int pos : masked_pos) {
            const float* row = probs.data() + static_cast<size_t>(pos) * K;
            const int tok = settings.temperature <= 1e-6f ? argmax_row(row, K)
                                                          : categorical_sample(row, K, rng);
            draws.push_back({pos, tok, row[tok]});
        }

        const int keep_masked = remask_count(L, t, s_total);
        int commit_count = static_cast<int>(draws.size()) - keep_masked;
        if (t == s_total) commit_count = static_cast<int>(draws.size());
        commit_count = std::clamp(commit_count, 0, static_cast<int>(draws.size()));

        // highest confidence commits; ties resolve to the lower position
        std::stable_sort(draws.begin(), draws.end(), [](const Draw& a, const Draw& b) {
            if (a.conf != b.conf) return a.conf > b.conf;
            return a.pos < b.pos;
        });
        for (int i = 0; i < commit_count; ++i) {
            const Draw& d = draws[i];
            grid.idx(0, d.pos) = d.token;
            committed[d.pos] = 1;
            conf_state[d.pos] = d.conf;
        }
        // uncommitted draws stay masked but report their sampled confidence
        for (size_t i = commit_count; i < draws.size(); ++i)
            conf_state[draws[i].pos] = draws[i].conf;

        if (trace) {
            DecodeStep step;
            step.step = t;
            step.confidence = conf_state;
            step.committed = committed;
            trace->steps.push_back(std::move(step));
        }
    }

    grid.mask.assign(n, 0);
    if (models.residual && grid.layers >= 2) {
        fill_residual_layers(models, grid, bundle.genre, music_cond, to_fill,
                             settings.residual_temperature, rng);
    } else if (grid.layers >= 2 && L > 0) {
        // no residual head trained yet: emit a base-layer-only grid
        TokenGrid base = TokenGrid::empty(n, 1);
        for (int i = 0; i < n; ++i) base.idx(0, i) = grid.idx(0, i);
        return base;
    }
    return grid;
}

IttoResult itto(const ModelSet& models, const TokenGrid& grid,
                const PoseConstraint& constraint, int genre, float eta, int iters) {
    if (eta <= 0.0f) throw ParameterError("itto: eta must be > 0");
    if (constraint.valid_count() == 0) throw DataError("itto: empty constraint");
    if (!models.t2m) throw CheckpointError("itto requires a trained t2m section");
    const MaskedTransformer& net = *models.t2m;
    const TokenizerModel& tok = models.tokenizer;
    const Skeleton skel = desk_skeleton();
    const int n = grid.length;

    IttoResult result;
    result.grid = grid;
    result.d_before = discrete_discrepancy(models, grid, constraint);
    result.d_after = result.d_before;
    if (result.d_before == 0.0f) return result;

    // residual-layer contribution held fixed during optimization
    Tensor resid_codes = Tensor::zeros({n, tok.code_dim});
    if (grid.layers > 1) {
        Tensor all = tok.grid_codes(grid);
        TokenGrid base_only = TokenGrid::empty(n, 1);
        for (int i = 0; i < n; ++i) base_only.idx(0, i) = grid.idx(0, i);
        Tensor base = tok.grid_codes(base_only);
        for (int i = 0; i < all.numel(); ++i) resid_codes.at(i) = all.at(i) - base.at(i);
    }

    std::vector<int> base_tokens(n);
    for (int i = 0; i < n; ++i) base_tokens[i] = grid.idx(0, i);
    Tensor embeddings;
    {
        Tensor rows = ops::embedding(net.token_emb, base_tokens);
        embeddings = rows.clone();
        embeddings.set_requires_grad();
    }

    const Tensor codebook0 = models.tokenizer.codebooks[0].detached();
    for (int it = 0; it < iters; ++it) {
        Tape tape;
        Tensor logits = net.forward_logits_from(embeddings, genre);
        Tensor probs = ops::softmax(logits, 1);
        Tensor latents = ops::add(ops::matmul(probs, codebook0), resid_codes);
        Tensor motion = tok.decode_latents(latents);
        Tensor p_hat = fk_positions_tensor(motion, skel, tok.fps, false);
        if (p_hat.rows() > constraint.frames)
            p_hat = ops::slice_rows(p_hat, 0, constraint.frames);
        Tensor d = pose_discrepancy(p_hat, constraint);
        tape.backward(d);
        float* x = embeddings.ptr();
        const float* g = embeddings.grad->data();
        for (int i = 0; i < embeddings.numel(); ++i) x[i] -= eta * g[i];
        embeddings.zero_grad();
    }

    // re-discretize through the classifier
    TokenGrid refined = grid;
    {
        Tensor logits = net.forward_logits_from(embeddings, genre);
        const int K = logits.cols();
        for (int i = 0; i < n; ++i)
            refined.idx(0, i) = argmax_row(logits.ptr() + static_cast<size_t>(i) * K, K);
    }
    if (models.residual && refined.layers >= 2) {
        Rng fill_rng(0);  // temperature 1e-8 path is deterministic
        fill_residual_layers(models, refined, genre, Tensor::zeros({n, kMusicFeatureDim}),
                             std::vector<uint8_t>(n, 1), 1e-8f, fill_rng);
    }

    const float d_refined = discrete_discrepancy(models, refined, constraint);
    if (d_refined <= result.d_before) {
        result.grid = refined;
        result.d_after = d_refined;
    }
    return result;
}

EditResult edit_spatial(const ModelSet& models, const MotionSequence& motion,
                        const PoseConstraint& constraint, const GuidanceBundle& bundle,
                        const SampleSettings& settings, float itto_eta, int itto_iters,
                        Rng& rng) {
    if (constraint.frames != motion.frames)
        throw DimensionError("edit_spatial: constraint frame count != motion frames");
    if (constraint.valid_count() == 0) throw DataError("edit_spatial: no valid constraint");
    if (!models.pose) throw CheckpointError("edit_spatial requires a pose adapter");

    GuidanceBundle b = bundle;
    b.pose = constraint;

    const int n =
        (motion.frames + models.tokenizer.downsample - 1) / models.tokenizer.downsample;
    DecodeTrace trace;
    TokenGrid decoded = parallel_decode(models, b, n, settings, rng, &trace);

    IttoResult refined =
        itto(models, decoded, constraint, bundle.genre, itto_eta, itto_iters);

    EditResult out;
    out.joint_dist_pre = refined.d_before;
    out.joint_dist_post = refined.d_after;
    out.motion = models.tokenizer.decode(refined.grid, motion.frames);
    return out;
}

MotionSequence edit_temporal(const ModelSet& models, const MotionSequence& motion,
                             const std::vector<std::pair<int, int>>& keep_ranges,
                             const GuidanceBundle& bundle, const SampleSettings& settings,
                             Rng& rng) {
    // an empty keep set degenerates to pure generation
    TokenGrid grid = models.tokenizer.encode(motion);
    const int n = grid.length;

    std::vector<std::pair<int, int>> ranges = keep_ranges;
    std::sort(ranges.begin(), ranges.end());
    int prev_end = 0;
    for (const auto& [b, e] : ranges) {
        if (b < 0 || e > n || b >= e) throw DataError("edit_temporal: range out of bounds");
        if (b < prev_end) throw DataError("edit_temporal: overlapping ranges");
        prev_end = e;
    }

    std::fill(grid.mask.begin(), grid.mask.end(), 1);
    for (const auto& [b, e] : ranges)
        for (int i = b; i < e; ++i) grid.mask[i] = 0;

    bool any_masked = false;
    for (uint8_t m : grid.mask) any_masked = any_masked || m;
    if (!any_masked) return models.tokenizer.decode(grid, motion.frames);

    TokenGrid done = decode_with_grid(models, bundle, grid, settings, rng);
    return models.tokenizer.decode(done, motion.frames);
}

MotionSequence generate_long(const ModelSet& models, const std::vector<SegmentSpec>& segments,
                             int overlap_tokens, const SampleSettings& settings, Rng& rng) {
    if (segments.empty()) throw DataError("generate_long: no segments");
    if (overlap_tokens < 1) throw ParameterError("generate_long: overlap must be >= 1");
    const int ds = models.tokenizer.downsample;

    std::vector<TokenGrid> grids;
    std::vector<int> lengths;
    int total_frames = 0;
    for (const SegmentSpec& seg : segments) {
        const int n = (seg.frames + ds - 1) / ds;
        if (n < 2 * overlap_tokens)
            throw DataError("generate_long: segment shorter than 2*overlap_tokens");
        grids.push_back(parallel_decode(models, seg.bundle, n, settings, rng));
        lengths.push_back(n);
        total_frames += seg.frames;
    }
    if (segments.size() == 1)
        return models.tokenizer.decode(grids[0], segments[0].frames);

    const int ov = overlap_tokens;
    for (size_t j = 0; j + 1 < grids.size(); ++j) {
        TokenGrid& left = grids[j];
        TokenGrid& right = grids[j + 1];
        const int wlen = 2 * ov;
        TokenGrid window = TokenGrid::empty(wlen, left.layers);
        for (int q = 0; q < left.layers; ++q)
            for (int i = 0; i < ov; ++i) {
                window.idx(q, i) = left.idx(q, left.length - ov + i);
                window.idx(q, ov + i) = right.idx(q, i);
            }
        const int m0 = ov / 2;
        for (int i = m0; i < m0 + ov; ++i) window.mask[i] = 1;

        // transition leads into the next segment: use its guidance; music
        // features stitched from both neighbours when present
        GuidanceBundle wb = segments[j + 1].bundle;
        wb.pose.reset();
        if (segments[j].bundle.music || segments[j + 1].bundle.music) {
            BeatTrack bt;
            bt.fps = models.tokenizer.fps;
            bt.feature_dim = kMusicFeatureDim;
            bt.features.assign(static_cast<size_t>(wlen) * ds * kMusicFeatureDim, 0.0f);
            auto copy_frames = [&](const std::optional<BeatTrack>& src, int src_frame0,
                                   int dst_frame0, int count) {
                if (!src || src->frames() == 0) return;
                for (int f = 0; f < count; ++f) {
                    const int sf = std::clamp(src_frame0 + f, 0, src->frames() - 1);
                    for (int d = 0; d < kMusicFeatureDim; ++d)
                        bt.features[static_cast<size_t>(dst_frame0 + f) * kMusicFeatureDim +
                                    d] = src->features[static_cast<size_t>(sf) *
                                                           kMusicFeatureDim +
                                                       d];
                }
            };
            copy_frames(segments[j].bundle.music, (lengths[j] - ov) * ds, 0, ov * ds);
            copy_frames(segments[j + 1].bundle.music, 0, ov * ds, ov * ds);
            wb.music = bt;
        }
        if (!wb.has_any()) wb.unconditional = true;

        TokenGrid redone = decode_with_grid(models, wb, window, settings, rng);
        for (int q = 0; q < left.layers; ++q)
            for (int i = m0; i < m0 + ov; ++i) {
                if (i < ov)
                    left.idx(q, left.length - ov + i) = redone.idx(q, i);
                else
                    right.idx(q, i - ov) = redone.idx(q, i);
            }
    }

    int total_tokens = 0;
    for (int len : lengths) total_tokens += len;
    TokenGrid full = TokenGrid::empty(total_tokens, grids[0].layers);
    int off = 0;
    for (size_t s = 0; s < grids.size(); ++s) {
        for (int q = 0; q < full.layers; ++q)
            for (int i = 0; i < lengths[s]; ++i) full.idx(q, off + i) = grids[s].idx(q, i);
        off += lengths[s];
    }
    return models.tokenizer.decode(full, total_frames);
}

}  // namespace dmsk
