#pragma once

// Shared test utilities: finite-difference gradient oracle and tiny model
// fixtures.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dmsk/adapters.hpp"
#include "dmsk/backbone.hpp"
#include "dmsk/config.hpp"
#include "dmsk/tensor.hpp"
#include "dmsk/tokenizer.hpp"

namespace dmsk::testing {

// Central finite differences against the recorded analytic gradient.
// forward() must rebuild the graph from the given leaves each call.
struct FdReport {
    double max_err = 0.0;     // worst |analytic - fd| after tolerance scaling
    double max_abs_err = 0.0;
    int checked = 0;
    bool ok = true;
    std::string worst;
};

inline FdReport fd_check(const std::function<Tensor()>& forward,
                         std::vector<Tensor> leaves, float eps = 1e-3f,
                         double rel_tol = 1e-3) {
    FdReport rep;
    // analytic pass
    {
        Tape tape;
        Tensor loss = forward();
        tape.backward(loss);
    }
    std::vector<std::vector<float>> analytic;
    for (Tensor& leaf : leaves) {
        analytic.push_back(*leaf.grad);
        leaf.zero_grad();
    }
    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor& leaf = leaves[li];
        for (int i = 0; i < leaf.numel(); ++i) {
            const float saved = leaf.at(i);
            leaf.at(i) = saved + eps;
            const double lp = forward().scalar();
            leaf.at(i) = saved - eps;
            const double lm = forward().scalar();
            leaf.at(i) = saved;
            const double fd = (lp - lm) / (2.0 * static_cast<double>(eps));
            const double an = analytic[li][i];
            const double scale = std::max({std::fabs(an), std::fabs(fd), 0.3});
            const double err = std::fabs(an - fd);
            ++rep.checked;
            rep.max_abs_err = std::max(rep.max_abs_err, err);
            const double scaled = err / scale;
            if (scaled > rep.max_err) {
                rep.max_err = scaled;
                rep.worst = "leaf " + std::to_string(li) + " elem " + std::to_string(i) +
                            " analytic " + std::to_string(an) + " fd " + std::to_string(fd);
            }
            if (scaled > rel_tol) rep.ok = false;
        }
    }
    return rep;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, float lo = -1.0f,
                            float hi = 1.0f, bool requires_grad = true) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (int i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(lo, hi);
    return t;
}

inline Config tiny_config() {
    Config cfg;
    cfg.set("model.width", "32");
    cfg.set("model.layers", "2");
    cfg.set("model.heads", "2");
    cfg.set("model.ffn", "64");
    cfg.set("resid.width", "32");
    cfg.set("resid.layers", "1");
    cfg.set("resid.heads", "2");
    cfg.set("resid.ffn", "64");
    cfg.set("tokenizer.codebook", "16");
    cfg.set("tokenizer.code_dim", "8");
    cfg.set("tokenizer.hidden", "16");
    return cfg;
}

// A structurally complete (untrained) model set for sampler plumbing tests.
inline ModelSet tiny_models(uint64_t seed = 5, int genre_count = 2) {
    Config cfg = tiny_config();
    Rng rng(seed);
    ModelSet m;
    m.tokenizer = TokenizerModel::init(cfg, desk_skeleton().feature_dim(), rng);
    m.tokenizer.trained = true;
    m.t2m = MaskedTransformer::init(m.tokenizer.codebook_size, genre_count,
                                    cfg.i("model.width"), cfg.i("model.layers"),
                                    cfg.i("model.heads"), cfg.i("model.ffn"),
                                    cfg.i("model.max_tokens"), rng);
    m.music = AdapterTower::init(*m.t2m, kMusicFeatureDim, rng);
    m.pose = AdapterTower::init(*m.t2m, desk_skeleton().joint_count * 4, rng);
    m.residual = ResidualHead::init(m.tokenizer.codebook_size, genre_count,
                                    m.tokenizer.quant_layers, cfg, rng);
    m.genre_names = {"breaking", "house"};
    m.freeze_all();
    return m;
}

}  // namespace dmsk::testing
