#pragma once

// Inference engine: multimodal classifier-free guidance, confidence-based
// parallel decoding, residual-layer decoding, pose-guided inference-time
// token optimization and the editing applications.

#include <optional>
#include <string>
#include <vector>

#include "dmsk/adapters.hpp"
#include "dmsk/config.hpp"
#include "dmsk/motion.hpp"
#include "dmsk/tensor.hpp"
#include "dmsk/tokenizer.hpp"

namespace dmsk {

struct GuidanceBundle {
    int genre = -1;  // -1 = absent
    std::optional<BeatTrack> music;
    std::optional<PoseConstraint> pose;
    float w_u = 1.0f, w_t = 4.0f, w_a = 1.0f, w_p = 1.0f;
    bool unconditional = false;

    bool has_any() const { return genre >= 0 || music.has_value() || pose.has_value(); }
    void check() const {
        if (!has_any() && !unconditional)
            throw UsageError("no condition given and unconditional flag not set");
    }
};

enum class CfgMode { kDelta, kLinear };

CfgMode cfg_mode_from_string(const std::string& s);

// Absent modalities pass nullptr. Delta form (default):
//   l = l_uncond + sum_m w_m * (l_m - l_uncond)
// computed as (1 - sum w_m) * l_u + sum w_m * l_m in double so the w = 0 and
// single-w = 1 cases are bit-exact. Linear form: (1-w_u)*l_u + sum w_m*l_m.
Tensor cfg_fuse(const Tensor& l_uncond, const Tensor* l_t, const Tensor* l_a,
                const Tensor* l_p, float w_u, float w_t, float w_a, float w_p,
                CfgMode mode = CfgMode::kDelta);

struct SampleSettings {
    int steps = 18;  // S_total
    float temperature = 1.0f;
    float residual_temperature = 1e-8f;
    CfgMode mode = CfgMode::kDelta;

    static SampleSettings from_config(const Config& cfg);
};

struct DecodeStep {
    int step = 0;
    std::vector<float> confidence;   // per position, in [0,1]
    std::vector<uint8_t> committed;  // cumulative commit state after the step
};

struct DecodeTrace {
    std::vector<DecodeStep> steps;
    void write_csv(const std::string& path, const std::string& header) const;
};

// Starts from a fully masked grid of the given token length.
TokenGrid parallel_decode(const ModelSet& models, const GuidanceBundle& bundle,
                          int length, const SampleSettings& settings, Rng& rng,
                          DecodeTrace* trace = nullptr);

// Completes a partially committed grid: positions with mask set are filled,
// committed ones are never resampled. The remask schedule runs on
// L = initially-masked count.
TokenGrid decode_with_grid(const ModelSet& models, const GuidanceBundle& bundle,
                           const TokenGrid& initial, const SampleSettings& settings,
                           Rng& rng, DecodeTrace* trace = nullptr);

struct IttoResult {
    TokenGrid grid;
    float d_before = 0.0f;  // discrepancy of the input grid's decode
    float d_after = 0.0f;   // discrepancy of the returned grid's decode
};

// Gradient descent on the continuous token-embedding relaxation with every
// model parameter frozen; re-discretizes via the classifier argmax. Never
// returns a grid with a larger discrepancy than the input.
IttoResult itto(const ModelSet& models, const TokenGrid& grid,
                const PoseConstraint& constraint, int genre, float eta, int iters);

struct EditResult {
    MotionSequence motion;
    float joint_dist_pre = 0.0f;   // before token optimization
    float joint_dist_post = 0.0f;  // after
};

// Regenerates all tokens under pose guidance; constraint validity marks the
// joints to preserve (root-relative positions).
EditResult edit_spatial(const ModelSet& models, const MotionSequence& motion,
                        const PoseConstraint& constraint, const GuidanceBundle& bundle,
                        const SampleSettings& settings, float itto_eta, int itto_iters,
                        Rng& rng);

// keep_ranges are [begin,end) pairs in token units; kept tokens are fixed to
// the encoded input, everything else is re-generated.
MotionSequence edit_temporal(const ModelSet& models, const MotionSequence& motion,
                             const std::vector<std::pair<int, int>>& keep_ranges,
                             const GuidanceBundle& bundle, const SampleSettings& settings,
                             Rng& rng);

struct SegmentSpec {
    GuidanceBundle bundle;
    int frames = 0;
};

// Generates each segment, then re-decodes a window around every junction
// (inner half of 2*overlap_tokens re-masked) conditioned on both neighbours'
// kept tokens. Total output frames equal the sum of segment frames.
MotionSequence generate_long(const ModelSet& models, const std::vector<SegmentSpec>& segments,
                             int overlap_tokens, const SampleSettings& settings, Rng& rng);

}  // namespace dmsk
