#pragma once

// Progressive training pipeline (tokenizer -> t2m -> music -> pose) plus
// corpus directory I/O and the held-out evaluation helpers.

#include <string>
#include <vector>

#include "dmsk/adapters.hpp"
#include "dmsk/config.hpp"
#include "dmsk/motion.hpp"

namespace dmsk {

struct Corpus {
    std::vector<CorpusClip> clips;
    std::vector<std::string> genre_names;
    int fps = 20;

    // Per-genre tail split: the last holdout_fraction of each genre's clips.
    std::vector<int> train_indices;
    std::vector<int> holdout_indices;
    void split(float holdout_fraction);
};

void save_corpus(const std::string& dir, const std::vector<CorpusClip>& clips,
                 const Config& cfg, bool force);
Corpus load_corpus(const std::string& dir);

struct TrainOptions {
    std::string stage;        // tokenizer | t2m | music | pose
    std::string data_dir;
    std::string out_path;
    std::string resume_path;  // prerequisite checkpoint / mid-stage resume
    std::string log_path;     // loss CSV; default <out>.log.csv
    Config cfg;
};

// Runs one stage to completion (or from a resumed step) and saves out_path.
void train_stage(const TrainOptions& opt);

// Mean per-joint position error (root-relative, non-root joints) of the
// tokenizer round trip.
float eval_roundtrip_mpjpe(const ModelSet& models, const Corpus& corpus,
                           bool holdout_only);
// Masked-only cross-entropy of the t2m model under a seeded mask draw.
float eval_masked_ce(const ModelSet& models, const Corpus& corpus, uint64_t seed,
                     bool holdout_only);

// Training-time pose constraints: 1-4 joints, 10-50% of frames.
PoseConstraint sample_training_constraint(const MotionSequence& motion,
                                          const Skeleton& skel, Rng& rng);

uint64_t stage_mix(uint64_t seed, uint64_t stage_id, uint64_t step);

}  // namespace dmsk
