#pragma once

// Evaluation suite: beat alignment, PFC, foot skating, Frechet distances on
// kinematic/geometric features, diversity, joint distance, and dance-beat
// extraction. All functions are pure.

#include <vector>

#include "dmsk/motion.hpp"

namespace dmsk {

struct GaussianSummary {
    int dim = 0;
    std::vector<double> mean;  // dim
    std::vector<double> cov;   // dim x dim, symmetric

    static GaussianSummary fit(const std::vector<std::vector<float>>& samples);
};

// (1/|Bm|) sum_m exp(-min_d ||t_d - t_m||^2 / (2 sigma^2)). Unit-agnostic:
// beats and sigma just have to share a unit. Empty dance beats score 0.
double beat_align_score(const std::vector<double>& music_beats,
                        const std::vector<double>& dance_beats, double sigma = 3.0);

// Local minima of the smoothed total joint-speed envelope, in seconds.
std::vector<double> extract_dance_beats(const MotionSequence& seq, const Skeleton& skel,
                                        int smooth_window = 5);

// Physical foot contact score (lower is better).
double pfc(const MotionSequence& seq, const Skeleton& skel);

// Fraction of evaluated frames where any foot is below h_contact while moving
// horizontally faster than v_slide.
double foot_skating_ratio(const MotionSequence& seq, const Skeleton& skel,
                          float h_contact = 0.05f, float v_slide = 0.1f);

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);
double fid(const std::vector<std::vector<float>>& gen,
           const std::vector<std::vector<float>>& ref);

// Per-joint mean/variance of speed and acceleration magnitudes (J*4 dims).
std::vector<float> kinematic_features(const MotionSequence& seq, const Skeleton& skel);
// Frequencies of 12 fixed boolean pose predicates.
std::vector<float> geometric_features(const MotionSequence& seq, const Skeleton& skel);
int geometric_feature_count();

// Mean pairwise Euclidean distance over unordered pairs.
double diversity(const std::vector<std::vector<float>>& features);

// D(P, P_hat) against root-relative FK of the motion.
float joint_distance(const PoseConstraint& constraint, const MotionSequence& motion,
                     const Skeleton& skel);

// Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
// Eigenvalues ascending; eigenvectors in columns of v.
void symmetric_eigen(std::vector<double> a, int n, std::vector<double>& eigenvalues,
                     std::vector<double>& v);

}  // namespace dmsk
