#pragma once

// Music and pose adapter towers: trainable copies of the backbone whose layer
// outputs feed the frozen backbone through zero-initialized bridges, plus the
// residual-layer refinement head and the adapter loss terms.

#include <optional>
#include <string>
#include <vector>

#include "dmsk/backbone.hpp"
#include "dmsk/checkpoint.hpp"
#include "dmsk/config.hpp"
#include "dmsk/motion.hpp"
#include "dmsk/tensor.hpp"
#include "dmsk/tokenizer.hpp"

namespace dmsk {

struct KinematicLossWeights {
    float pos = 0.5f;
    float vel = 0.1f;
    float acc = 0.05f;
    float foot = 0.1f;
    float discrepancy = 1.0f;   // lambda_D
    float unmask = 1.0f;        // lambda_unmask for the CE part
    float foot_static_threshold = 0.01f;

    static KinematicLossWeights from_config(const Config& cfg);
};

struct AdapterTower {
    MaskedTransformer net;              // trainable counterpart of the backbone
    std::vector<LinearLayer> bridges;   // per layer, width -> width, zero-init
    LinearLayer cond_proj;              // cond_dim -> width
    int cond_dim = 0;

    // Tower copies the trained backbone; bridges start at exact zero so
    // attachment is a bit-exact no-op.
    static AdapterTower init(const MaskedTransformer& backbone, int cond_dim, Rng& rng);

    // cond: n x cond_dim, already pooled to token resolution.
    std::vector<Tensor> forward_injections(const std::vector<int>& tokens, int genre,
                                           const Tensor& cond) const;

    std::vector<Tensor> params();
    void to_section(CheckpointSection& sec) const;
    static AdapterTower from_section(const CheckpointSection& sec);
};

// Tower-attached forward through the frozen backbone.
Tensor attach_forward(const MaskedTransformer& backbone, const AdapterTower& tower,
                      const std::vector<int>& tokens, int genre, const Tensor& cond);

// Second small masked transformer predicting residual-layer tokens from the
// base layer; music features are fused by addition.
struct ResidualHead {
    MaskedTransformer net;
    LinearLayer music_proj;  // F_m -> width
    Tensor layer_emb;        // (Q-1) x width

    static ResidualHead init(int codebook_size, int genre_count, int quant_layers,
                             const Config& cfg, Rng& rng);
    // base_tokens in [0,K); layer >= 1; music may be empty (zeros are used).
    Tensor forward_logits(const std::vector<int>& base_tokens, int genre,
                          const Tensor& music, int layer) const;

    std::vector<Tensor> params();
    void to_section(CheckpointSection& sec) const;
    static ResidualHead from_section(const CheckpointSection& sec);
};

// Joint positions as a differentiable tensor, frames x (J*3). with_root
// integrates root velocity (global frame); otherwise root-relative.
Tensor fk_positions_tensor(const Tensor& motion, const Skeleton& skel, int fps,
                           bool with_root);

// Mean squared error per frame summed over joints (Suppl.-style scaling):
// (1/frames) * sum_k ||a_k - b_k||^2.
Tensor frame_mse(const Tensor& a, const Tensor& b);

struct KinematicTerms {
    Tensor pos, vel, acc, foot;
};
// sampled/gt: frames x D motion feature tensors (gt is constant).
KinematicTerms kinematic_losses(const Tensor& sampled, const Tensor& gt,
                                const Skeleton& skel, int fps,
                                float foot_static_threshold);

// D(P, P_hat) = sum_valid ||P_hat - P||^2 / sum I. p_hat: frames x (J*3).
Tensor pose_discrepancy(const Tensor& p_hat, const PoseConstraint& constraint);

Tensor music_adapter_loss(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& masked, const Tensor& sampled_motion,
                          const Tensor& gt_motion, const Skeleton& skel, int fps,
                          const KinematicLossWeights& w);

Tensor pose_adapter_loss(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& masked, const PoseConstraint& constraint,
                         const Tensor& p_hat, const KinematicLossWeights& w);

// Average-pools per-frame features to token resolution (factor = downsample).
Tensor pool_to_tokens(const std::vector<float>& per_frame, int frames, int dim,
                      int downsample);
// Music condition for a beat track: n x F_m (zeros when track is empty).
Tensor music_condition(const BeatTrack& beats, int token_count, int downsample);
// Pose condition: positions ++ validity per frame, pooled: n x (J*3+J).
Tensor pose_condition(const PoseConstraint& c, int token_count, int downsample);

// Everything needed for inference, loaded from one checkpoint.
struct ModelSet {
    TokenizerModel tokenizer;
    std::optional<MaskedTransformer> t2m;
    std::optional<AdapterTower> music;
    std::optional<AdapterTower> pose;
    std::optional<ResidualHead> residual;
    std::vector<std::string> genre_names;

    int genre_id_of(const std::string& name) const;  // throws DataError
    static ModelSet load(const Checkpoint& ck);
    Checkpoint to_checkpoint() const;
    void freeze_all();
};

}  // namespace dmsk
