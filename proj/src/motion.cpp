#include "dmsk/motion.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "dmsk/errors.hpp"

namespace dmsk {

namespace {

constexpr double kTau = 6.283185307179586476925;

// Discrete tempo grid, BPM. Tempo is a property of the clip, not the genre,
// so music guidance carries information genre labels do not.
constexpr float kTempoGrid[12] = {80, 86, 92, 98, 104, 110, 116, 122, 128, 134, 140, 146};

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
    uint64_t h = seed * 0x9e3779b97f4a7c15ull + a * 0xbf58476d1ce4e5b9ull +
                 b * 0x94d049bb133111ebull + 0x2545f4914f6cdd1dull;
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return h;
}

struct JointWave {
    int joint;
    Vec3 amp;        // meters, per axis
    float phase;     // radians
    float harmonic;  // relative amplitude of the 2nd harmonic
};

struct GenreTemplate {
    std::vector<JointWave> waves;
    float foot_lift;    // swing lift, meters
    float root_sway;    // horizontal sway amplitude, meters
    float hand_raise;   // static z offset added to both hands, meters
    float warp_depth;   // beat-locked speed modulation in (0,1)
};

const GenreTemplate& genre_template(int gid) {
    static const std::vector<GenreTemplate> tpl = {
        // breaking: large arm swings, deep bounce
        {{{4, {0.30f, 0.05f, 0.25f}, 0.0f, 0.15f},
          {6, {0.30f, 0.05f, 0.25f}, 3.1416f, 0.15f},
          {1, {0.0f, 0.0f, 0.10f}, 1.5708f, 0.0f},
          {2, {0.0f, 0.0f, 0.12f}, 1.5708f, 0.0f},
          {8, {0.0f, 0.0f, 0.06f}, 0.0f, 0.0f},
          {11, {0.0f, 0.0f, 0.06f}, 3.1416f, 0.0f}},
         0.06f, 0.05f, 0.0f, 0.55f},
        // house: quick feet, swaying hips
        {{{7, {0.08f, 0.0f, 0.0f}, 0.0f, 0.0f},
          {10, {0.08f, 0.0f, 0.0f}, 0.0f, 0.0f},
          {4, {0.0f, 0.10f, 0.15f}, 0.7854f, 0.0f},
          {6, {0.0f, 0.10f, 0.15f}, 3.927f, 0.0f},
          {2, {0.0f, 0.0f, 0.04f}, 0.0f, 0.0f}},
         0.09f, 0.06f, 0.0f, 0.5f},
        // locking: sharp horizontal arm throws
        {{{4, {0.32f, 0.0f, 0.08f}, 0.0f, 0.3f},
          {6, {0.32f, 0.0f, 0.08f}, 3.1416f, 0.3f},
          {2, {0.0f, 0.05f, 0.05f}, 1.5708f, 0.2f},
          {1, {0.04f, 0.0f, 0.0f}, 0.0f, 0.0f}},
         0.05f, 0.04f, 0.0f, 0.65f},
        // popping: chest and head pulses, forward hand jabs
        {{{1, {0.0f, 0.06f, 0.10f}, 0.0f, 0.25f},
          {2, {0.0f, 0.08f, 0.10f}, 0.3f, 0.25f},
          {4, {0.05f, 0.28f, 0.05f}, 0.0f, 0.1f},
          {6, {0.05f, 0.28f, 0.05f}, 1.5708f, 0.1f}},
         0.04f, 0.03f, 0.0f, 0.7f},
        // waacking: overhead arm rotations
        {{{4, {0.22f, 0.10f, 0.30f}, 0.0f, 0.1f},
          {6, {0.25f, 0.10f, 0.10f}, 1.9f, 0.1f},
          {1, {0.03f, 0.0f, 0.04f}, 0.0f, 0.0f},
          {2, {0.0f, 0.0f, 0.05f}, 0.8f, 0.0f}},
         0.05f, 0.05f, 0.55f, 0.5f},
        // krump: whole-body hits, stomping feet
        {{{4, {0.20f, 0.15f, 0.20f}, 0.0f, 0.2f},
          {6, {0.20f, 0.15f, 0.20f}, 2.5f, 0.2f},
          {1, {0.0f, 0.05f, 0.12f}, 1.0f, 0.2f},
          {2, {0.0f, 0.06f, 0.10f}, 1.2f, 0.0f},
          {8, {0.0f, 0.0f, 0.05f}, 0.0f, 0.0f},
          {11, {0.0f, 0.0f, 0.05f}, 3.1416f, 0.0f}},
         0.10f, 0.04f, 0.0f, 0.6f},
    };
    return tpl[static_cast<size_t>(gid)];
}

// Beat-locked time warp: s is the beat phase (t * tempo / 60). The warped
// phase advances slowest exactly at integer beats, so the total joint-speed
// envelope dips once per beat.
double warp_phase(double s, double depth) { return s - depth * std::sin(kTau * s) / kTau; }

void io_fail(const std::string& what) { throw DataError(what); }

void write_bytes(std::ofstream& f, const void* p, size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& f, void* p, size_t n, const char* what) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(f.gcount()) != n)
        io_fail(std::string("truncated payload reading ") + what);
}

void write_u32(std::ofstream& f, uint32_t v) { write_bytes(f, &v, 4); }

uint32_t read_u32(std::ifstream& f, const char* what) {
    uint32_t v = 0;
    read_bytes(f, &v, 4, what);
    return v;
}

void check_magic(std::ifstream& f, const char* magic, const std::string& path) {
    char got[4];
    read_bytes(f, got, 4, "magic");
    if (std::memcmp(got, magic, 4) != 0)
        io_fail("bad magic in " + path + " (expected " + magic + ")");
    const uint32_t version = read_u32(f, "version");
    if (version != 1) io_fail("unsupported version in " + path);
}

std::ifstream open_in(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) io_fail("cannot open " + path);
    return f;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) io_fail("cannot open " + path + " for writing");
    return f;
}

}  // namespace

Vec3 Skeleton::rest_position(int joint) const {
    Vec3 p{0, 0, 0};
    int j = joint;
    while (j >= 0) {
        p.x += rest_offset[j].x;
        p.y += rest_offset[j].y;
        p.z += rest_offset[j].z;
        j = parent[j];
    }
    return p;
}

Skeleton desk_skeleton() {
    Skeleton s;
    s.joint_count = 13;
    s.joint_names = {"root",   "spine",  "head",   "l_shoulder", "l_hand",
                     "r_shoulder", "r_hand", "l_hip", "l_knee",  "l_foot",
                     "r_hip",  "r_knee", "r_foot"};
    s.parent = {-1, 0, 1, 1, 3, 1, 5, 0, 7, 8, 0, 10, 11};
    s.rest_offset = {
        {0.0f, 0.0f, 0.0f},     // root
        {0.0f, 0.0f, 0.25f},    // spine
        {0.0f, 0.0f, 0.40f},    // head
        {-0.20f, 0.0f, 0.30f},  // l_shoulder
        {-0.45f, 0.0f, 0.0f},   // l_hand
        {0.20f, 0.0f, 0.30f},   // r_shoulder
        {0.45f, 0.0f, 0.0f},    // r_hand
        {-0.10f, 0.0f, -0.05f}, // l_hip
        {0.0f, 0.0f, -0.40f},   // l_knee
        {0.0f, 0.0f, -0.45f},   // l_foot
        {0.10f, 0.0f, -0.05f},  // r_hip
        {0.0f, 0.0f, -0.40f},   // r_knee
        {0.0f, 0.0f, -0.45f},   // r_foot
    };
    s.foot_joints = {9, 12};
    return s;
}

int PoseConstraint::valid_count() const {
    int n = 0;
    for (uint8_t v : validity) n += v != 0;
    return n;
}

void forward_kinematics(const float* row, const Skeleton& skel, const Vec3& root_position,
                        float* out) {
    out[0] = root_position.x;
    out[1] = root_position.y;
    out[2] = root_position.z;
    for (int j = 1; j < skel.joint_count; ++j) {
        const float* local = row + 3 + (j - 1) * 3;
        out[j * 3 + 0] = root_position.x + local[0];
        out[j * 3 + 1] = root_position.y + local[1];
        out[j * 3 + 2] = root_position.z + local[2];
    }
}

std::vector<Vec3> integrate_root(const MotionSequence& seq, const Vec3& root_start) {
    std::vector<Vec3> path(seq.frames);
    Vec3 p = root_start;
    const float dt = 1.0f / static_cast<float>(seq.fps);
    for (int t = 0; t < seq.frames; ++t) {
        p.x += seq.at(t, 0) * dt;
        p.y += seq.at(t, 1) * dt;
        p.z += seq.at(t, 2) * dt;
        path[t] = p;
    }
    return path;
}

std::vector<float> fk_sequence(const MotionSequence& seq, const Skeleton& skel,
                               bool with_root) {
    if (seq.dim != skel.feature_dim())
        throw DimensionError("fk_sequence: feature width does not match skeleton");
    const int J = skel.joint_count;
    std::vector<float> out(static_cast<size_t>(seq.frames) * J * 3);
    std::vector<Vec3> path;
    if (with_root) path = integrate_root(seq, Vec3{0.0f, 0.0f, kRootRestHeight});
    for (int t = 0; t < seq.frames; ++t) {
        const Vec3 root = with_root ? path[t] : Vec3{0, 0, 0};
        forward_kinematics(seq.features.data() + static_cast<size_t>(t) * seq.dim, skel,
                           root, out.data() + static_cast<size_t>(t) * J * 3);
    }
    return out;
}

Kinematics derive_kinematics(const MotionSequence& seq, const Skeleton& skel) {
    if (seq.frames < 3) throw DataError("derive_kinematics: sequence too short (N < 3)");
    const int J = skel.joint_count;
    const std::vector<float> pos = fk_sequence(seq, skel, true);
    Kinematics k;
    const float fps = static_cast<float>(seq.fps);
    k.velocity.resize(static_cast<size_t>(seq.frames - 1) * J * 3);
    for (size_t i = 0; i < k.velocity.size(); ++i)
        k.velocity[i] = (pos[i + static_cast<size_t>(J) * 3] - pos[i]) * fps;
    k.acceleration.resize(static_cast<size_t>(seq.frames - 2) * J * 3);
    for (size_t i = 0; i < k.acceleration.size(); ++i)
        k.acceleration[i] = (k.velocity[i + static_cast<size_t>(J) * 3] - k.velocity[i]) * fps;
    return k;
}

const std::vector<std::string>& known_genres() {
    static const std::vector<std::string> g = {"breaking", "house",    "locking",
                                               "popping",  "waacking", "krump"};
    return g;
}

int genre_id(const std::string& name) {
    const auto& g = known_genres();
    for (size_t i = 0; i < g.size(); ++i)
        if (g[i] == name) return static_cast<int>(i);
    throw DataError("unknown genre: " + name);
}

CorpusClip synth_clip(uint64_t seed, const std::string& genre, int index,
                      float clip_seconds, int fps) {
    const int gid = genre_id(genre);
    const int N = static_cast<int>(std::lround(clip_seconds * fps));
    if (N < 64) throw DataError("synth_clip: clip_seconds * fps must be >= 64 frames");

    Rng rng(mix_seed(seed, static_cast<uint64_t>(gid), static_cast<uint64_t>(index)));
    const GenreTemplate& tpl = genre_template(gid);
    const Skeleton skel = desk_skeleton();
    const float tempo = kTempoGrid[rng.uniform_int(12)];
    const float amp_scale = rng.uniform_int(2) == 0 ? 0.8f : 1.0f;
    // Per-clip phase variation for each wave, from a discrete set.
    std::vector<float> wave_phase(tpl.waves.size());
    for (float& p : wave_phase) p = 1.5708f * static_cast<float>(rng.uniform_int(4));
    const float sway_phase = 1.5708f * static_cast<float>(rng.uniform_int(4));

    CorpusClip clip;
    clip.genre = gid;
    clip.genre_name = genre;
    clip.index = index;

    MotionSequence& m = clip.motion;
    m.fps = fps;
    m.frames = N;
    m.dim = skel.feature_dim();
    m.features.assign(static_cast<size_t>(N) * m.dim, 0.0f);

    const double beat_hz = static_cast<double>(tempo) / 60.0;
    const int J = skel.joint_count;

    // Root path: gentle horizontal sway, constant height.
    std::vector<Vec3> root(N + 1);
    for (int t = 0; t <= N; ++t) {
        const double s = beat_hz * t / fps;
        const double w = warp_phase(s, tpl.warp_depth);
        root[t].x = tpl.root_sway * static_cast<float>(std::sin(kTau * w + sway_phase));
        root[t].y = 0.6f * tpl.root_sway * static_cast<float>(std::cos(kTau * w + sway_phase));
        root[t].z = kRootRestHeight;
    }

    std::vector<Vec3> rest(J);
    for (int j = 0; j < J; ++j) rest[j] = skel.rest_position(j);

    for (int t = 0; t < N; ++t) {
        float* row = m.features.data() + static_cast<size_t>(t) * m.dim;
        const double s = beat_hz * t / fps;
        const double w = warp_phase(s, tpl.warp_depth);

        // root velocity (m/s): consistent with integrate_root's convention
        // pos[t] = start + sum_{u<=t} v[u]/fps, start = root[0] shifted so the
        // first frame lands on root[0] - i.e. v[t] = (root[t+1]-root[t])*fps
        // yields pos[t] = root[t+1]; the offset is irrelevant (translation).
        row[0] = (root[t + 1].x - root[t].x) * fps;
        row[1] = (root[t + 1].y - root[t].y) * fps;
        row[2] = (root[t + 1].z - root[t].z) * fps;

        // oscillating joints, root-relative
        std::vector<Vec3> local(J);
        for (int j = 1; j < J; ++j) {
            local[j].x = rest[j].x;
            local[j].y = rest[j].y;
            local[j].z = rest[j].z;
        }
        local[4].z += tpl.hand_raise;
        local[6].z += tpl.hand_raise;
        for (size_t wi = 0; wi < tpl.waves.size(); ++wi) {
            const JointWave& jw = tpl.waves[wi];
            const float base =
                static_cast<float>(std::sin(kTau * w + jw.phase + wave_phase[wi]));
            const float harm =
                jw.harmonic *
                static_cast<float>(std::sin(2.0 * kTau * w + 2.0f * (jw.phase + wave_phase[wi])));
            const float osc = amp_scale * (base + harm);
            local[jw.joint].x += jw.amp.x * osc;
            local[jw.joint].y += jw.amp.y * osc;
            local[jw.joint].z += jw.amp.z * osc;
        }

        // feet: left planted on [k, k+0.5), right on [k+0.5, k+1)
        const double beat_frac = s - std::floor(s);
        const bool left_planted = beat_frac < 0.5;
        // swing phase in [0,1) of whichever foot is in the air
        const double swing_u = left_planted ? beat_frac / 0.5 : (beat_frac - 0.5) / 0.5;
        for (int side = 0; side < 2; ++side) {
            const int foot = skel.foot_joints[side];
            const bool planted = side == 0 ? left_planted : !left_planted;
            // feet stay pinned in world space while planted
            Vec3 world{rest[foot].x, rest[foot].y, 0.0f};
            if (!planted) {
                const double lift = tpl.foot_lift * std::sin(3.14159265358979 * swing_u) *
                                    std::sin(3.14159265358979 * swing_u);
                world.z = static_cast<float>(lift) * amp_scale;
            }
            local[foot].x = world.x - root[t + 1].x;
            local[foot].y = world.y - root[t + 1].y;
            local[foot].z = world.z - root[t + 1].z;
            // keep knees between hip and foot
            const int knee = foot - 1;
            const int hip = knee - 1;
            local[knee].x = 0.5f * (local[hip].x + local[foot].x);
            local[knee].y = 0.5f * (local[hip].y + local[foot].y) + 0.04f;
            local[knee].z = 0.5f * (local[hip].z + local[foot].z) + 0.02f;
        }

        for (int j = 1; j < J; ++j) {
            row[3 + (j - 1) * 3 + 0] = local[j].x;
            row[3 + (j - 1) * 3 + 1] = local[j].y;
            row[3 + (j - 1) * 3 + 2] = local[j].z;
        }
        row[m.dim - 2] = left_planted ? 1.0f : 0.0f;
        row[m.dim - 1] = left_planted ? 0.0f : 1.0f;
    }

    // beat track
    BeatTrack& b = clip.beats;
    b.fps = fps;
    b.tempo = tempo;
    b.feature_dim = kMusicFeatureDim;
    const double period = 60.0 / tempo;
    for (double tb = 0.0; tb < clip_seconds - 1e-9; tb += period) b.beat_times.push_back(tb);
    b.features.assign(static_cast<size_t>(N) * kMusicFeatureDim, 0.0f);
    std::vector<int> beat_frames;
    beat_frames.reserve(b.beat_times.size());
    for (double tb : b.beat_times) {
        int fb = static_cast<int>(std::lround(tb * fps));
        if (fb >= N) fb = N - 1;
        beat_frames.push_back(fb);
    }
    for (int t = 0; t < N; ++t) {
        float* f = b.features.data() + static_cast<size_t>(t) * kMusicFeatureDim;
        int dmin = N;
        for (int fb : beat_frames) dmin = std::min(dmin, std::abs(t - fb));
        f[0] = dmin == 0 ? 1.0f : std::exp(-0.5f * static_cast<float>(dmin));
        const double s = beat_hz * t / fps;
        f[1] = static_cast<float>(s - std::floor(s));
        f[2] = static_cast<float>(std::sin(kTau * s));
        f[3] = static_cast<float>(std::cos(kTau * s));
        f[4] = (tempo - 80.0f) / 70.0f;
        f[5] = 0.6f + 0.4f * static_cast<float>(std::sin(kTau * s / 8.0));
        f[6] = rng.uniform(-1.0f, 1.0f);
        f[7] = rng.uniform(-1.0f, 1.0f);
    }
    return clip;
}

std::vector<CorpusClip> synth_corpus(uint64_t seed, const std::vector<std::string>& genres,
                                     int clips_per_genre, float clip_seconds, int fps) {
    std::vector<CorpusClip> out;
    out.reserve(genres.size() * static_cast<size_t>(clips_per_genre));
    for (const std::string& g : genres)
        for (int i = 0; i < clips_per_genre; ++i)
            out.push_back(synth_clip(seed, g, i, clip_seconds, fps));
    return out;
}

void write_motion(const std::string& path, const MotionSequence& seq) {
    if (seq.frames == 0) throw DataError("write_motion: empty sequence");
    std::ofstream f = open_out(path);
    write_bytes(f, "DMOT", 4);
    write_u32(f, 1);
    write_u32(f, static_cast<uint32_t>(seq.fps));
    write_u32(f, static_cast<uint32_t>(seq.frames));
    write_u32(f, static_cast<uint32_t>(seq.dim));
    write_bytes(f, seq.features.data(), seq.features.size() * 4);
    if (!f) io_fail("write failed: " + path);
}

MotionSequence read_motion(const std::string& path) {
    std::ifstream f = open_in(path);
    check_magic(f, "DMOT", path);
    MotionSequence seq;
    seq.fps = static_cast<int>(read_u32(f, "fps"));
    seq.frames = static_cast<int>(read_u32(f, "frames"));
    seq.dim = static_cast<int>(read_u32(f, "dim"));
    if (seq.fps <= 0 || seq.frames <= 0 || seq.dim <= 0)
        io_fail("invalid motion header in " + path);
    seq.features.resize(static_cast<size_t>(seq.frames) * seq.dim);
    read_bytes(f, seq.features.data(), seq.features.size() * 4, "motion payload");
    return seq;
}

void write_beats(const std::string& path, const BeatTrack& track) {
    std::ofstream f = open_out(path);
    write_bytes(f, "DBEA", 4);
    write_u32(f, 1);
    write_u32(f, static_cast<uint32_t>(track.fps));
    write_u32(f, static_cast<uint32_t>(track.frames()));
    write_u32(f, static_cast<uint32_t>(track.feature_dim));
    write_u32(f, static_cast<uint32_t>(track.beat_times.size()));
    write_bytes(f, track.beat_times.data(), track.beat_times.size() * 8);
    write_bytes(f, track.features.data(), track.features.size() * 4);
    if (!f) io_fail("write failed: " + path);
}

BeatTrack read_beats(const std::string& path) {
    std::ifstream f = open_in(path);
    check_magic(f, "DBEA", path);
    BeatTrack t;
    t.fps = static_cast<int>(read_u32(f, "fps"));
    const uint32_t n = read_u32(f, "frames");
    t.feature_dim = static_cast<int>(read_u32(f, "feature dim"));
    const uint32_t beat_count = read_u32(f, "beat count");
    t.beat_times.resize(beat_count);
    read_bytes(f, t.beat_times.data(), beat_count * 8ull, "beat times");
    t.features.resize(static_cast<size_t>(n) * t.feature_dim);
    read_bytes(f, t.features.data(), t.features.size() * 4, "beat features");
    // The file format carries no tempo field; recover it from beat spacing.
    if (beat_count >= 2)
        t.tempo = static_cast<float>(60.0 * (beat_count - 1) /
                                     (t.beat_times.back() - t.beat_times.front()));
    return t;
}

void write_constraint(const std::string& path, const PoseConstraint& c) {
    if (c.frames == 0) throw DataError("write_constraint: empty constraint");
    std::ofstream f = open_out(path);
    write_bytes(f, "DPOS", 4);
    write_u32(f, 1);
    write_u32(f, static_cast<uint32_t>(c.frames));
    write_u32(f, static_cast<uint32_t>(c.joints));
    write_bytes(f, c.positions.data(), c.positions.size() * 4);
    write_bytes(f, c.validity.data(), c.validity.size());
    if (!f) io_fail("write failed: " + path);
}

PoseConstraint read_constraint(const std::string& path) {
    std::ifstream f = open_in(path);
    check_magic(f, "DPOS", path);
    PoseConstraint c;
    c.frames = static_cast<int>(read_u32(f, "frames"));
    c.joints = static_cast<int>(read_u32(f, "joints"));
    if (c.frames <= 0 || c.joints <= 0) io_fail("invalid constraint header in " + path);
    c.positions.resize(static_cast<size_t>(c.frames) * c.joints * 3);
    c.validity.resize(static_cast<size_t>(c.frames) * c.joints);
    read_bytes(f, c.positions.data(), c.positions.size() * 4, "constraint positions");
    read_bytes(f, c.validity.data(), c.validity.size(), "constraint validity");
    return c;
}

}  // namespace dmsk
