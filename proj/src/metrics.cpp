#include "dmsk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dmsk/errors.hpp"

namespace dmsk {

namespace {

double norm3(const float* p) {
    return std::sqrt(static_cast<double>(p[0]) * p[0] + static_cast<double>(p[1]) * p[1] +
                     static_cast<double>(p[2]) * p[2]);
}

}  // namespace

GaussianSummary GaussianSummary::fit(const std::vector<std::vector<float>>& samples) {
    if (samples.empty()) throw DataError("GaussianSummary: no samples");
    GaussianSummary g;
    g.dim = static_cast<int>(samples[0].size());
    g.mean.assign(g.dim, 0.0);
    g.cov.assign(static_cast<size_t>(g.dim) * g.dim, 0.0);
    const double inv_n = 1.0 / static_cast<double>(samples.size());
    for (const auto& s : samples) {
        if (static_cast<int>(s.size()) != g.dim)
            throw DimensionError("GaussianSummary: feature dim mismatch");
        for (int i = 0; i < g.dim; ++i) g.mean[i] += s[i] * inv_n;
    }
    for (const auto& s : samples)
        for (int i = 0; i < g.dim; ++i)
            for (int j = 0; j < g.dim; ++j)
                g.cov[static_cast<size_t>(i) * g.dim + j] +=
                    (s[i] - g.mean[i]) * (s[j] - g.mean[j]) * inv_n;
    // near-singular desk-scale covariances get a small ridge
    const double ridge =
        static_cast<int>(samples.size()) <= g.dim ? 1e-6 : 1e-10;
    for (int i = 0; i < g.dim; ++i) g.cov[static_cast<size_t>(i) * g.dim + i] += ridge;
    return g;
}

double beat_align_score(const std::vector<double>& music_beats,
                        const std::vector<double>& dance_beats, double sigma) {
    if (music_beats.empty()) throw DataError("beat_align_score: no music beats");
    if (sigma <= 0.0) throw ParameterError("beat_align_score: sigma must be > 0");
    if (dance_beats.empty()) {
        std::fprintf(stderr, "warning: no dance beats, BAS = 0\n");
        return 0.0;
    }
    double acc = 0.0;
    for (double tm : music_beats) {
        double best = 1e300;
        for (double td : dance_beats) best = std::min(best, (td - tm) * (td - tm));
        acc += std::exp(-best / (2.0 * sigma * sigma));
    }
    return acc / static_cast<double>(music_beats.size());
}

std::vector<double> extract_dance_beats(const MotionSequence& seq, const Skeleton& skel,
                                        int smooth_window) {
    if (seq.frames < 5) throw DataError("extract_dance_beats: sequence too short (N < 5)");
    const Kinematics kin = derive_kinematics(seq, skel);
    const int J = skel.joint_count;
    const int n = seq.frames - 1;
    std::vector<double> env(n, 0.0);
    for (int t = 0; t < n; ++t)
        for (int j = 0; j < J; ++j)
            env[t] += norm3(kin.velocity.data() + (static_cast<size_t>(t) * J + j) * 3);

    // centered moving average, edges clamped
    std::vector<double> smooth(n, 0.0);
    const int half = std::max(1, smooth_window) / 2;
    for (int t = 0; t < n; ++t) {
        const int a = std::max(0, t - half);
        const int b = std::min(n - 1, t + half);
        double s = 0.0;
        for (int u = a; u <= b; ++u) s += env[u];
        smooth[t] = s / (b - a + 1);
    }

    std::vector<double> beats;
    const double eps = 1e-12;
    for (int t = 1; t + 1 < n; ++t) {
        if (smooth[t] < smooth[t - 1] - eps && smooth[t] <= smooth[t + 1] + eps) {
            // skip flat plateaus after the first minimum
            if (!beats.empty() &&
                (t + 0.5) / seq.fps - beats.back() < 1.5 / seq.fps)
                continue;
            if (smooth[t] <= smooth[t + 1] - eps || smooth[t] < smooth[t - 1] - eps)
                beats.push_back((t + 0.5) / seq.fps);
        }
    }
    return beats;
}

double pfc(const MotionSequence& seq, const Skeleton& skel) {
    if (seq.frames < 3) throw DataError("pfc: sequence too short (N < 3)");
    const std::vector<float> pos = fk_sequence(seq, skel, true);
    const int J = skel.joint_count;
    const int N = seq.frames;
    const double fps = seq.fps;
    const int lf = skel.foot_joints[0], rf = skel.foot_joints[1];

    auto com = [&](int t, int c) {
        double s = 0.0;
        for (int j = 0; j < J; ++j) s += pos[(static_cast<size_t>(t) * J + j) * 3 + c];
        return s / J;
    };
    auto joint = [&](int t, int j, int c) {
        return static_cast<double>(pos[(static_cast<size_t>(t) * J + j) * 3 + c]);
    };

    double sum_s = 0.0;
    double max_a = 0.0;
    for (int t = 1; t + 1 < N; ++t) {
        double a[3];
        for (int c = 0; c < 3; ++c)
            a[c] = (com(t + 1, c) - 2.0 * com(t, c) + com(t - 1, c)) * fps * fps;
        a[2] = std::max(a[2], 0.0);  // upward acceleration only
        const double an = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
        max_a = std::max(max_a, an);

        double vl = 0.0, vr = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double dl = (joint(t + 1, lf, c) - joint(t, lf, c)) * fps;
            const double dr = (joint(t + 1, rf, c) - joint(t, rf, c)) * fps;
            vl += dl * dl;
            vr += dr * dr;
        }
        sum_s += an * std::sqrt(vl) * std::sqrt(vr);
    }
    if (max_a == 0.0) return 0.0;
    return sum_s / (static_cast<double>(N) * max_a);
}

double foot_skating_ratio(const MotionSequence& seq, const Skeleton& skel, float h_contact,
                          float v_slide) {
    if (h_contact <= 0.0f || v_slide <= 0.0f)
        throw ParameterError("foot_skating_ratio: thresholds must be > 0");
    if (seq.frames < 2) throw DataError("foot_skating_ratio: sequence too short");
    const std::vector<float> pos = fk_sequence(seq, skel, true);
    const int J = skel.joint_count;
    const double fps = seq.fps;
    int skating = 0;
    const int evaluated = seq.frames - 1;
    for (int t = 0; t < evaluated; ++t) {
        bool slide = false;
        for (int side = 0; side < 2 && !slide; ++side) {
            const int f = skel.foot_joints[side];
            const double z = pos[(static_cast<size_t>(t) * J + f) * 3 + 2];
            const double dx = (pos[(static_cast<size_t>(t + 1) * J + f) * 3 + 0] -
                               pos[(static_cast<size_t>(t) * J + f) * 3 + 0]) *
                              fps;
            const double dy = (pos[(static_cast<size_t>(t + 1) * J + f) * 3 + 1] -
                               pos[(static_cast<size_t>(t) * J + f) * 3 + 1]) *
                              fps;
            slide = z < h_contact && std::sqrt(dx * dx + dy * dy) > v_slide;
        }
        skating += slide ? 1 : 0;
    }
    return static_cast<double>(skating) / evaluated;
}

void symmetric_eigen(std::vector<double> a, int n, std::vector<double>& eigenvalues,
                     std::vector<double>& v) {
    v.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;

    auto at = [&](std::vector<double>& m, int i, int j) -> double& {
        return m[static_cast<size_t>(i) * n + j];
    };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += at(a, i, j) * at(a, i, j);
        if (off < 1e-22) break;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = at(a, p, q);
                if (std::fabs(apq) < 1e-300) continue;
                const double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = at(a, k, p), akq = at(a, k, q);
                    at(a, k, p) = c * akp - s * akq;
                    at(a, k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = at(a, p, k), aqk = at(a, q, k);
                    at(a, p, k) = c * apk - s * aqk;
                    at(a, q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = at(v, k, p), vkq = at(v, k, q);
                    at(v, k, p) = c * vkp - s * vkq;
                    at(v, k, q) = s * vkp + c * vkq;
                }
            }
    }
    eigenvalues.resize(n);
    for (int i = 0; i < n; ++i) eigenvalues[i] = a[static_cast<size_t>(i) * n + i];
}

namespace {

// B = sqrt(A) for symmetric PSD A, eigenvalues clamped at 0.
std::vector<double> sqrtm_psd(const std::vector<double>& a, int n) {
    std::vector<double> eval, evec;
    symmetric_eigen(a, n, eval, evec);
    std::vector<double> out(static_cast<size_t>(n) * n, 0.0);
    for (int k = 0; k < n; ++k) {
        const double s = std::sqrt(std::max(eval[k], 0.0));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                out[static_cast<size_t>(i) * n + j] +=
                    s * evec[static_cast<size_t>(i) * n + k] *
                    evec[static_cast<size_t>(j) * n + k];
    }
    return out;
}

std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b,
                              int n) {
    std::vector<double> c(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double av = a[static_cast<size_t>(i) * n + k];
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j)
                c[static_cast<size_t>(i) * n + j] += av * b[static_cast<size_t>(k) * n + j];
        }
    return c;
}

}  // namespace

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
    if (a.dim != b.dim) throw DimensionError("frechet_distance: feature dim mismatch");
    const int n = a.dim;
    double mean_term = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = a.mean[i] - b.mean[i];
        mean_term += d * d;
    }
    const std::vector<double> sa = sqrtm_psd(a.cov, n);
    std::vector<double> inner = matmul_sq(matmul_sq(sa, b.cov, n), sa, n);
    // symmetrize against round-off before the second square root
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double m = 0.5 * (inner[static_cast<size_t>(i) * n + j] +
                                    inner[static_cast<size_t>(j) * n + i]);
            inner[static_cast<size_t>(i) * n + j] = m;
            inner[static_cast<size_t>(j) * n + i] = m;
        }
    std::vector<double> eval, evec;
    symmetric_eigen(inner, n, eval, evec);
    double trace_sqrt = 0.0;
    for (double e : eval) trace_sqrt += std::sqrt(std::max(e, 0.0));
    double trace_ab = 0.0;
    for (int i = 0; i < n; ++i)
        trace_ab += a.cov[static_cast<size_t>(i) * n + i] +
                    b.cov[static_cast<size_t>(i) * n + i];
    return mean_term + trace_ab - 2.0 * trace_sqrt;
}

double fid(const std::vector<std::vector<float>>& gen,
           const std::vector<std::vector<float>>& ref) {
    return frechet_distance(GaussianSummary::fit(gen), GaussianSummary::fit(ref));
}

std::vector<float> kinematic_features(const MotionSequence& seq, const Skeleton& skel) {
    if (seq.frames < 3) throw DataError("kinematic_features: sequence too short");
    const Kinematics kin = derive_kinematics(seq, skel);
    const int J = skel.joint_count;
    std::vector<float> out;
    out.reserve(static_cast<size_t>(J) * 4);
    const int nv = seq.frames - 1;
    const int na = seq.frames - 2;
    for (int j = 0; j < J; ++j) {
        double ms = 0.0, ms2 = 0.0;
        for (int t = 0; t < nv; ++t) {
            const double s = norm3(kin.velocity.data() + (static_cast<size_t>(t) * J + j) * 3);
            ms += s;
            ms2 += s * s;
        }
        ms /= nv;
        ms2 = ms2 / nv - ms * ms;
        double ma = 0.0, ma2 = 0.0;
        for (int t = 0; t < na; ++t) {
            const double s =
                norm3(kin.acceleration.data() + (static_cast<size_t>(t) * J + j) * 3);
            ma += s;
            ma2 += s * s;
        }
        ma /= na;
        ma2 = ma2 / na - ma * ma;
        out.push_back(static_cast<float>(ms));
        out.push_back(static_cast<float>(std::max(0.0, ms2)));
        out.push_back(static_cast<float>(ma));
        out.push_back(static_cast<float>(std::max(0.0, ma2)));
    }
    return out;
}

int geometric_feature_count() { return 12; }

std::vector<float> geometric_features(const MotionSequence& seq, const Skeleton& skel) {
    if (seq.frames < 3) throw DataError("geometric_features: sequence too short");
    const std::vector<float> pos = fk_sequence(seq, skel, true);
    const int J = skel.joint_count;
    auto p = [&](int t, int j, int c) {
        return static_cast<double>(pos[(static_cast<size_t>(t) * J + j) * 3 + c]);
    };
    auto dist = [&](int t, int a, int b) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double d = p(t, a, c) - p(t, b, c);
            s += d * d;
        }
        return std::sqrt(s);
    };
    // joints: 2 head, 3/5 shoulders, 4/6 hands, 7/10 hips, 8/11 knees, 9/12 feet
    auto knee_bent = [&](int t, int hip, int knee, int foot) {
        double d1[3], d2[3];
        for (int c = 0; c < 3; ++c) {
            d1[c] = p(t, hip, c) - p(t, knee, c);
            d2[c] = p(t, foot, c) - p(t, knee, c);
        }
        const double dot = d1[0] * d2[0] + d1[1] * d2[1] + d1[2] * d2[2];
        return dot > 0.0;  // angle below 90 degrees
    };
    const double rest_head = kRootRestHeight + 0.65;

    std::vector<int> counts(12, 0);
    for (int t = 0; t < seq.frames; ++t) {
        const bool lh_up = p(t, 4, 2) > p(t, 2, 2);
        const bool rh_up = p(t, 6, 2) > p(t, 2, 2);
        const double shoulder_w = dist(t, 3, 5);
        const double hip_w = dist(t, 7, 10);
        counts[0] += lh_up;
        counts[1] += rh_up;
        counts[2] += lh_up && rh_up;
        counts[3] += dist(t, 4, 6) > 1.5 * shoulder_w;
        counts[4] += dist(t, 4, 6) < 0.3;
        counts[5] += knee_bent(t, 7, 8, 9);
        counts[6] += knee_bent(t, 10, 11, 12);
        counts[7] += dist(t, 9, 12) > 1.5 * hip_w;
        counts[8] += p(t, 9, 0) > p(t, 12, 0);  // left foot right of right foot
        counts[9] += p(t, 9, 2) > 0.15;
        counts[10] += p(t, 12, 2) > 0.15;
        counts[11] += p(t, 2, 2) < 0.85 * rest_head;
    }
    std::vector<float> out(12);
    for (int i = 0; i < 12; ++i)
        out[i] = static_cast<float>(counts[i]) / static_cast<float>(seq.frames);
    return out;
}

double diversity(const std::vector<std::vector<float>>& features) {
    if (features.size() < 2) throw DataError("diversity: need at least 2 clips");
    const size_t n = features.size();
    double acc = 0.0;
    size_t pairs = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            if (features[i].size() != features[j].size())
                throw DimensionError("diversity: feature dim mismatch");
            double s = 0.0;
            for (size_t k = 0; k < features[i].size(); ++k) {
                const double d = static_cast<double>(features[i][k]) - features[j][k];
                s += d * d;
            }
            acc += std::sqrt(s);
            ++pairs;
        }
    return acc / static_cast<double>(pairs);
}

float joint_distance(const PoseConstraint& constraint, const MotionSequence& motion,
                     const Skeleton& skel) {
    const int total_valid = constraint.valid_count();
    if (total_valid == 0) throw DataError("joint_distance: no valid entries");
    if (motion.frames < constraint.frames)
        throw DimensionError("joint_distance: motion shorter than constraint");
    const std::vector<float> fk = fk_sequence(motion, skel, false);
    const int J = skel.joint_count;
    double acc = 0.0;
    for (int t = 0; t < constraint.frames; ++t)
        for (int j = 0; j < constraint.joints; ++j) {
            if (!constraint.valid(t, j)) continue;
            for (int c = 0; c < 3; ++c) {
                const double d =
                    static_cast<double>(fk[(static_cast<size_t>(t) * J + j) * 3 + c]) -
                    constraint.pos(t, j, c);
                acc += d * d;
            }
        }
    return static_cast<float>(acc / total_valid);
}

}  // namespace dmsk
