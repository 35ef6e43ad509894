#include "dmsk/adapters.hpp"

#include <cmath>

#include "dmsk/errors.hpp"

namespace dmsk {

using namespace ops;

KinematicLossWeights KinematicLossWeights::from_config(const Config& cfg) {
    KinematicLossWeights w;
    w.pos = cfg.f("loss.lambda_pos");
    w.vel = cfg.f("loss.lambda_vel");
    w.acc = cfg.f("loss.lambda_acc");
    w.foot = cfg.f("loss.lambda_foot");
    w.discrepancy = cfg.f("loss.lambda_d");
    w.unmask = cfg.f("loss.lambda_unmask");
    w.foot_static_threshold = cfg.f("loss.foot_static_threshold");
    return w;
}

AdapterTower AdapterTower::init(const MaskedTransformer& backbone, int cond_dim, Rng& rng) {
    AdapterTower t;
    t.net = backbone.clone();
    t.cond_dim = cond_dim;
    t.cond_proj = LinearLayer::init(cond_dim, backbone.width, rng);
    for (int i = 0; i < backbone.layers; ++i)
        t.bridges.push_back(LinearLayer::zero_init(backbone.width, backbone.width));
    return t;
}

std::vector<Tensor> AdapterTower::forward_injections(const std::vector<int>& tokens,
                                                     int genre, const Tensor& cond) const {
    if (cond.rows() != static_cast<int>(tokens.size()) || cond.cols() != cond_dim)
        throw DimensionError("adapter condition shape mismatch");
    Tensor x = net.embed(tokens, genre);
    Tensor cond_rows = cond_proj.forward(cond);
    Tensor zero_head = Tensor::zeros({1, net.width});
    x = add(x, concat_rows({zero_head, cond_rows}));

    std::vector<Tensor> inj;
    inj.reserve(net.layers);
    for (int i = 0; i < net.layers; ++i) {
        x = net.blocks[i].forward(x, nullptr);
        inj.push_back(bridges[i].forward(x));
    }
    return inj;
}

std::vector<Tensor> AdapterTower::params() {
    std::vector<Tensor> p = net.params();
    for (LinearLayer& l : bridges) {
        p.push_back(l.w);
        p.push_back(l.b);
    }
    p.push_back(cond_proj.w);
    p.push_back(cond_proj.b);
    return p;
}

void AdapterTower::to_section(CheckpointSection& sec) const {
    net.to_section(sec);
    sec.put_values("cond_dim", {static_cast<float>(cond_dim)});
    for (size_t i = 0; i < bridges.size(); ++i) {
        sec.put("bridge" + std::to_string(i) + ".w", bridges[i].w);
        sec.put("bridge" + std::to_string(i) + ".b", bridges[i].b);
    }
    sec.put("cond_proj.w", cond_proj.w);
    sec.put("cond_proj.b", cond_proj.b);
}

AdapterTower AdapterTower::from_section(const CheckpointSection& sec) {
    AdapterTower t;
    t.net = MaskedTransformer::from_section(sec);
    t.cond_dim = static_cast<int>(sec.get_value("cond_dim"));
    for (int i = 0; i < t.net.layers; ++i) {
        LinearLayer l;
        l.w = sec.get("bridge" + std::to_string(i) + ".w", true);
        l.b = sec.get("bridge" + std::to_string(i) + ".b", true);
        t.bridges.push_back(std::move(l));
    }
    t.cond_proj.w = sec.get("cond_proj.w", true);
    t.cond_proj.b = sec.get("cond_proj.b", true);
    return t;
}

Tensor attach_forward(const MaskedTransformer& backbone, const AdapterTower& tower,
                      const std::vector<int>& tokens, int genre, const Tensor& cond) {
    if (tower.net.layers != backbone.layers)
        throw DataError("attach_forward: tower/backbone layer count mismatch");
    const std::vector<Tensor> inj = tower.forward_injections(tokens, genre, cond);
    return backbone.forward_logits(tokens, genre, &inj);
}

ResidualHead ResidualHead::init(int codebook_size, int genre_count, int quant_layers,
                                const Config& cfg, Rng& rng) {
    ResidualHead r;
    r.net = MaskedTransformer::init(codebook_size, genre_count, cfg.i("resid.width"),
                                    cfg.i("resid.layers"), cfg.i("resid.heads"),
                                    cfg.i("resid.ffn"), cfg.i("model.max_tokens"), rng);
    r.music_proj = LinearLayer::init(kMusicFeatureDim, r.net.width, rng);
    r.layer_emb = Tensor::randn({std::max(1, quant_layers - 1), r.net.width}, rng, 0.02f,
                                true);
    return r;
}

Tensor ResidualHead::forward_logits(const std::vector<int>& base_tokens, int genre,
                                    const Tensor& music, int layer) const {
    const int n = static_cast<int>(base_tokens.size());
    if (layer < 1 || layer > layer_emb.rows())
        throw ParameterError("residual head: bad layer index");
    Tensor inj0;
    {
        Tensor music_rows = music.data && music.numel() > 0
                                ? music_proj.forward(music)
                                : Tensor::zeros({n, net.width});
        Tensor layer_rows = embedding(layer_emb, std::vector<int>(n, layer - 1));
        Tensor zero_head = Tensor::zeros({1, net.width});
        inj0 = concat_rows({zero_head, add(music_rows, layer_rows)});
    }
    std::vector<Tensor> inj{inj0};
    return net.forward_logits(base_tokens, genre, &inj);
}

std::vector<Tensor> ResidualHead::params() {
    std::vector<Tensor> p = net.params();
    p.push_back(music_proj.w);
    p.push_back(music_proj.b);
    p.push_back(layer_emb);
    return p;
}

void ResidualHead::to_section(CheckpointSection& sec) const {
    net.to_section(sec);
    sec.put("music_proj.w", music_proj.w);
    sec.put("music_proj.b", music_proj.b);
    sec.put("layer_emb", layer_emb);
}

ResidualHead ResidualHead::from_section(const CheckpointSection& sec) {
    ResidualHead r;
    r.net = MaskedTransformer::from_section(sec);
    r.music_proj.w = sec.get("music_proj.w", true);
    r.music_proj.b = sec.get("music_proj.b", true);
    r.layer_emb = sec.get("layer_emb", true);
    return r;
}

Tensor fk_positions_tensor(const Tensor& motion, const Skeleton& skel, int fps,
                           bool with_root) {
    const int N = motion.rows();
    const int local_width = 3 * (skel.joint_count - 1);
    if (motion.cols() != skel.feature_dim())
        throw DimensionError("fk_positions_tensor: feature width mismatch");
    Tensor locals = slice_cols(motion, 3, 3 + local_width);
    if (!with_root) {
        Tensor root = Tensor::zeros({N, 3});
        return concat_cols({root, locals});
    }
    Tensor root_vel = slice_cols(motion, 0, 3);
    Tensor root_path = scale(cumsum_rows(root_vel), 1.0f / static_cast<float>(fps));
    return concat_cols({root_path, add_col_blocks(locals, root_path)});
}

Tensor frame_mse(const Tensor& a, const Tensor& b) {
    return scale(mse(a, b), static_cast<float>(a.cols()));
}

KinematicTerms kinematic_losses(const Tensor& sampled, const Tensor& gt,
                                const Skeleton& skel, int fps,
                                float foot_static_threshold) {
    if (sampled.shape != gt.shape) throw DimensionError("kinematic_losses: shape mismatch");
    const int N = sampled.rows();
    const float ffps = static_cast<float>(fps);

    // position/velocity/acceleration on root-relative joints
    Tensor p_hat = fk_positions_tensor(sampled, skel, fps, false);
    Tensor p_gt = fk_positions_tensor(gt, skel, fps, false).detached();

    KinematicTerms t;
    t.pos = frame_mse(p_hat, p_gt);

    Tensor v_hat = scale(sub(slice_rows(p_hat, 1, N), slice_rows(p_hat, 0, N - 1)), ffps);
    Tensor v_gt = scale(sub(slice_rows(p_gt, 1, N), slice_rows(p_gt, 0, N - 1)), ffps);
    t.vel = frame_mse(v_hat, v_gt);

    Tensor a_hat = scale(sub(slice_rows(v_hat, 1, N - 1), slice_rows(v_hat, 0, N - 2)), ffps);
    Tensor a_gt = scale(sub(slice_rows(v_gt, 1, N - 1), slice_rows(v_gt, 0, N - 2)), ffps);
    t.acc = frame_mse(a_hat, a_gt);

    // foot loss in the world frame; static indicator from the ground truth
    Tensor world_hat = fk_positions_tensor(sampled, skel, fps, true);
    const std::vector<float> world_gt = fk_sequence(tensor_to_motion(gt, fps), skel, true);
    const int J = skel.joint_count;
    const int lf = skel.foot_joints[0], rf = skel.foot_joints[1];
    Tensor feet_hat = concat_cols({slice_cols(world_hat, lf * 3, lf * 3 + 3),
                                   slice_cols(world_hat, rf * 3, rf * 3 + 3)});
    Tensor disp = sub(slice_rows(feet_hat, 1, N), slice_rows(feet_hat, 0, N - 1));

    Tensor static_mask = Tensor::zeros({N - 1, 6});
    for (int k = 0; k + 1 < N; ++k) {
        for (int side = 0; side < 2; ++side) {
            const int f = side == 0 ? lf : rf;
            double sq = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double d =
                    static_cast<double>(world_gt[(static_cast<size_t>(k) + 1) * J * 3 +
                                                 f * 3 + c]) -
                    world_gt[static_cast<size_t>(k) * J * 3 + f * 3 + c];
                sq += d * d;
            }
            if (std::sqrt(sq) < foot_static_threshold)
                for (int c = 0; c < 3; ++c) static_mask.at(k, side * 3 + c) = 1.0f;
        }
    }
    Tensor masked_disp = mul(disp, static_mask);
    t.foot = scale(l1(masked_disp, Tensor::zeros({N - 1, 6})), 6.0f);
    return t;
}

Tensor pose_discrepancy(const Tensor& p_hat, const PoseConstraint& constraint) {
    const int N = constraint.frames, J = constraint.joints;
    if (p_hat.rows() != N || p_hat.cols() != J * 3)
        throw DimensionError("pose_discrepancy: shape mismatch");
    const int total_valid = constraint.valid_count();
    if (total_valid == 0) throw DataError("pose_discrepancy: no valid constraint entries");

    Tensor target = Tensor::zeros({N, J * 3});
    Tensor mask = Tensor::zeros({N, J * 3});
    for (int t = 0; t < N; ++t)
        for (int j = 0; j < J; ++j)
            if (constraint.valid(t, j))
                for (int c = 0; c < 3; ++c) {
                    target.at(t, j * 3 + c) = constraint.pos(t, j, c);
                    mask.at(t, j * 3 + c) = 1.0f;
                }
    Tensor diff = sub(p_hat, target);
    Tensor masked_sq = mul(mul(diff, diff), mask);
    return scale(sum(masked_sq), 1.0f / static_cast<float>(total_valid));
}

Tensor music_adapter_loss(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& masked, const Tensor& sampled_motion,
                          const Tensor& gt_motion, const Skeleton& skel, int fps,
                          const KinematicLossWeights& w) {
    if (skel.joint_count == 0) throw DataError("music_adapter_loss: missing skeleton");
    Tensor ce = t2m_loss(logits, targets, masked, w.unmask);
    KinematicTerms kt =
        kinematic_losses(sampled_motion, gt_motion, skel, fps, w.foot_static_threshold);
    Tensor out = add(ce, scale(kt.pos, w.pos));
    out = add(out, scale(kt.vel, w.vel));
    out = add(out, scale(kt.acc, w.acc));
    return add(out, scale(kt.foot, w.foot));
}

Tensor pose_adapter_loss(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& masked, const PoseConstraint& constraint,
                         const Tensor& p_hat, const KinematicLossWeights& w) {
    Tensor ce = t2m_loss(logits, targets, masked, w.unmask);
    return add(ce, scale(pose_discrepancy(p_hat, constraint), w.discrepancy));
}

Tensor pool_to_tokens(const std::vector<float>& per_frame, int frames, int dim,
                      int downsample) {
    const int n = (frames + downsample - 1) / downsample;
    Tensor out = Tensor::zeros({n, dim});
    for (int k = 0; k < n; ++k) {
        const int f0 = k * downsample;
        const int f1 = std::min(frames, f0 + downsample);
        const float inv = 1.0f / static_cast<float>(std::max(1, f1 - f0));
        for (int f = f0; f < f1; ++f)
            for (int d = 0; d < dim; ++d)
                out.at(k, d) += per_frame[static_cast<size_t>(f) * dim + d] * inv;
    }
    return out;
}

Tensor music_condition(const BeatTrack& beats, int token_count, int downsample) {
    if (beats.frames() == 0) return Tensor::zeros({token_count, kMusicFeatureDim});
    Tensor pooled =
        pool_to_tokens(beats.features, beats.frames(), beats.feature_dim, downsample);
    if (pooled.rows() == token_count) return pooled;
    // pad by repeating the last pooled step or trim
    Tensor out = Tensor::zeros({token_count, kMusicFeatureDim});
    for (int k = 0; k < token_count; ++k) {
        const int src = std::min(k, pooled.rows() - 1);
        for (int d = 0; d < kMusicFeatureDim; ++d) out.at(k, d) = pooled.at(src, d);
    }
    return out;
}

Tensor pose_condition(const PoseConstraint& c, int token_count, int downsample) {
    const int J = c.joints;
    const int dim = J * 3 + J;
    std::vector<float> per_frame(static_cast<size_t>(c.frames) * dim, 0.0f);
    for (int t = 0; t < c.frames; ++t)
        for (int j = 0; j < J; ++j) {
            if (!c.valid(t, j)) continue;  // invalid entries stay exactly zero
            for (int k = 0; k < 3; ++k)
                per_frame[static_cast<size_t>(t) * dim + j * 3 + k] = c.pos(t, j, k);
            per_frame[static_cast<size_t>(t) * dim + J * 3 + j] = 1.0f;
        }
    Tensor pooled = pool_to_tokens(per_frame, c.frames, dim, downsample);
    if (pooled.rows() == token_count) return pooled;
    Tensor out = Tensor::zeros({token_count, dim});
    for (int k = 0; k < token_count; ++k) {
        const int src = std::min(k, pooled.rows() - 1);
        for (int d = 0; d < dim; ++d) out.at(k, d) = pooled.at(src, d);
    }
    return out;
}

int ModelSet::genre_id_of(const std::string& name) const {
    for (size_t i = 0; i < genre_names.size(); ++i)
        if (genre_names[i] == name) return static_cast<int>(i);
    throw DataError("genre not present in checkpoint: " + name);
}

ModelSet ModelSet::load(const Checkpoint& ck) {
    ModelSet m;
    const CheckpointSection* tok = ck.find("tokenizer");
    if (!tok) throw CheckpointError("checkpoint has no tokenizer section");
    m.tokenizer = TokenizerModel::from_section(*tok);
    if (const CheckpointSection* sec = ck.find("t2m")) {
        m.t2m = MaskedTransformer::from_section(*sec);
        m.genre_names.resize(m.t2m->genre_count);
        for (const TensorRecord& r : sec->tensors)
            if (r.name.rfind("genre:", 0) == 0 && !r.data.empty()) {
                const int id = static_cast<int>(r.data[0]);
                if (id >= 0 && id < static_cast<int>(m.genre_names.size()))
                    m.genre_names[id] = r.name.substr(6);
            }
    }
    if (const CheckpointSection* sec = ck.find("music_adapter"))
        m.music = AdapterTower::from_section(*sec);
    if (const CheckpointSection* sec = ck.find("pose_adapter"))
        m.pose = AdapterTower::from_section(*sec);
    if (const CheckpointSection* sec = ck.find("residual_head"))
        m.residual = ResidualHead::from_section(*sec);
    return m;
}

Checkpoint ModelSet::to_checkpoint() const {
    Checkpoint ck;
    tokenizer.to_section(ck.add("tokenizer"));
    if (t2m) {
        CheckpointSection& sec = ck.add("t2m");
        t2m->to_section(sec);
        for (size_t i = 0; i < genre_names.size(); ++i)
            sec.put_values("genre:" + genre_names[i], {static_cast<float>(i)});
    }
    if (music) music->to_section(ck.add("music_adapter"));
    if (pose) pose->to_section(ck.add("pose_adapter"));
    if (residual) residual->to_section(ck.add("residual_head"));
    return ck;
}

void ModelSet::freeze_all() {
    for (Conv1dLayer* l : {&tokenizer.enc1, &tokenizer.enc2, &tokenizer.enc3,
                           &tokenizer.dec1, &tokenizer.dec2, &tokenizer.dec3,
                           &tokenizer.dec4}) {
        l->w.requires_grad = false;
        l->w.grad.reset();
        l->b.requires_grad = false;
        l->b.grad.reset();
    }
    for (Tensor& cb : tokenizer.codebooks) {
        cb.requires_grad = false;
        cb.grad.reset();
    }
    if (t2m) t2m->freeze();
    auto freeze_tower = [](AdapterTower& t) {
        t.net.freeze();
        for (LinearLayer& l : t.bridges) {
            l.w.requires_grad = false;
            l.w.grad.reset();
            l.b.requires_grad = false;
            l.b.grad.reset();
        }
        t.cond_proj.w.requires_grad = false;
        t.cond_proj.w.grad.reset();
        t.cond_proj.b.requires_grad = false;
        t.cond_proj.b.grad.reset();
    };
    if (music) freeze_tower(*music);
    if (pose) freeze_tower(*pose);
    if (residual) {
        residual->net.freeze();
        residual->music_proj.w.requires_grad = false;
        residual->music_proj.w.grad.reset();
        residual->music_proj.b.requires_grad = false;
        residual->music_proj.b.grad.reset();
        residual->layer_emb.requires_grad = false;
        residual->layer_emb.grad.reset();
    }
}

}  // namespace dmsk
