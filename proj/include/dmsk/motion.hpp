#pragma once

// Skeleton definition, pose-feature representation, forward kinematics,
// procedural motion/beat corpus and binary file I/O.
//
// Feature layout per frame (D = 3 + 3*(J-1) + 2 = 41 with J = 13):
//   [0..3)    root velocity, m/s
//   [3..39)   root-relative positions of the 12 non-root joints, meters
//   [39..41)  foot contact flags for left/right foot, in [0,1]

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dmsk/tensor.hpp"

namespace dmsk {

struct Vec3 {
    float x = 0.0f, y = 0.0f, z = 0.0f;
};

struct Skeleton {
    int joint_count = 0;
    std::vector<int> parent;            // root has parent -1
    std::vector<Vec3> rest_offset;      // per-joint offset from parent, meters
    std::array<int, 2> foot_joints{};   // left, right; must be leaves
    std::vector<std::string> joint_names;

    int feature_dim() const { return 3 + 3 * (joint_count - 1) + 2; }
    // Root-relative position of a joint in the rest pose (offsets composed
    // down the tree).
    Vec3 rest_position(int joint) const;
};

// 13-joint desk skeleton: root, spine, head, shoulders/hands, hips/knees/feet.
Skeleton desk_skeleton();

struct MotionSequence {
    int fps = 20;
    int frames = 0;
    int dim = 0;
    std::vector<float> features;  // frames x dim, row-major

    float& at(int t, int d) { return features[static_cast<size_t>(t) * dim + d]; }
    float at(int t, int d) const { return features[static_cast<size_t>(t) * dim + d]; }
    bool empty() const { return frames == 0; }
};

struct BeatTrack {
    int fps = 20;
    float tempo = 120.0f;             // beats per minute
    std::vector<double> beat_times;   // strictly ascending, seconds
    int feature_dim = 0;              // F_m
    std::vector<float> features;      // frames x F_m
    int frames() const {
        return feature_dim == 0 ? 0 : static_cast<int>(features.size()) / feature_dim;
    }
};

struct PoseConstraint {
    int frames = 0;
    int joints = 0;
    std::vector<float> positions;     // frames x joints x 3, meters (root-relative)
    std::vector<uint8_t> validity;    // frames x joints

    float& pos(int t, int j, int c) {
        return positions[(static_cast<size_t>(t) * joints + j) * 3 + c];
    }
    float pos(int t, int j, int c) const {
        return positions[(static_cast<size_t>(t) * joints + j) * 3 + c];
    }
    bool valid(int t, int j) const { return validity[static_cast<size_t>(t) * joints + j] != 0; }
    int valid_count() const;
};

constexpr int kMusicFeatureDim = 8;
constexpr float kRootRestHeight = 0.9f;

// Global joint positions for one feature row. The caller supplies the
// accumulated root position; pass {0,0,0} for root-relative output.
void forward_kinematics(const float* feature_row, const Skeleton& skel,
                        const Vec3& root_position, float* out_joints_xyz);

// Root path integrated from the root-velocity slice, starting at root_start.
std::vector<Vec3> integrate_root(const MotionSequence& seq, const Vec3& root_start);

// Joint positions for a whole sequence: frames x J x 3. with_root integrates
// the root path from (0, 0, kRootRestHeight); otherwise positions are
// root-relative.
std::vector<float> fk_sequence(const MotionSequence& seq, const Skeleton& skel,
                               bool with_root);

struct Kinematics {
    std::vector<float> velocity;      // (frames-1) x J x 3, m/s
    std::vector<float> acceleration;  // (frames-2) x J x 3, m/s^2
};
Kinematics derive_kinematics(const MotionSequence& seq, const Skeleton& skel);

const std::vector<std::string>& known_genres();
int genre_id(const std::string& name);  // throws DataError for unknown genres

struct CorpusClip {
    MotionSequence motion;
    BeatTrack beats;
    int genre = 0;
    std::string genre_name;
    int index = 0;  // index within genre
};

// Deterministic function of (seed, genre, index). Joints oscillate with a
// beat-locked time warp so the speed envelope dips once per beat; foot
// contacts toggle at the half-beat period.
CorpusClip synth_clip(uint64_t seed, const std::string& genre, int index,
                      float clip_seconds, int fps);

std::vector<CorpusClip> synth_corpus(uint64_t seed, const std::vector<std::string>& genres,
                                     int clips_per_genre, float clip_seconds, int fps);

// Binary I/O. Motion "DMOT", beats "DBEA", constraints "DPOS"; little-endian,
// u32 version = 1. Throws DataError on magic/version mismatch or truncation.
void write_motion(const std::string& path, const MotionSequence& seq);
MotionSequence read_motion(const std::string& path);
void write_beats(const std::string& path, const BeatTrack& track);
BeatTrack read_beats(const std::string& path);
void write_constraint(const std::string& path, const PoseConstraint& c);
PoseConstraint read_constraint(const std::string& path);

}  // namespace dmsk
