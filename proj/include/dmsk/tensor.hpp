#pragma once

// Dense float32 tensors with reverse-mode autodiff on an explicit tape.
// Recording is single-threaded per tape; distinct tapes on distinct threads
// do not share state. Heavy inner loops dispatch to dmsk::kernels.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <utility>
#include <vector>

#include "dmsk/errors.hpp"

namespace dmsk {

// Deterministic RNG with self-contained distributions so results depend only
// on the seed, not on the standard-library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    // [0,1), 24-bit resolution
    float uniform() { return static_cast<float>(gen_() >> 8) * (1.0f / 16777216.0f); }
    float uniform(float a, float b) { return a + (b - a) * uniform(); }
    // [0,n)
    int uniform_int(int n) { return static_cast<int>(gen_() % static_cast<uint32_t>(n)); }
    float normal() {
        // Box-Muller without caching the second value
        float u1 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        const float u2 = uniform();
        return std::sqrt(-2.0f * std::log(u1)) * std::cos(6.2831853071795864769f * u2);
    }
    float gumbel() {
        float u = uniform();
        if (u < 1e-10f) u = 1e-10f;
        if (u > 1.0f - 1e-10f) u = 1.0f - 1e-10f;
        return -std::log(-std::log(u));
    }
    uint32_t next_u32() { return gen_(); }

private:
    std::mt19937 gen_;
};

class Tape;

struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<float>> data;
    std::shared_ptr<std::vector<float>> grad;  // present iff requires_grad
    bool requires_grad = false;
    Tape* tape = nullptr;  // tape this value was recorded on; null for leaves

    Tensor() = default;

    int numel() const {
        int n = 1;
        for (int e : shape) n *= e;
        return n;
    }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    float* ptr() { return data->data(); }
    const float* ptr() const { return data->data(); }
    float& at(int i) { return (*data)[i]; }
    float at(int i) const { return (*data)[i]; }
    float& at(int r, int c) { return (*data)[static_cast<size_t>(r) * cols() + c]; }
    float at(int r, int c) const { return (*data)[static_cast<size_t>(r) * cols() + c]; }

    float scalar() const;
    void set_requires_grad();
    void zero_grad();
    Tensor detached() const;  // shares data, drops grad tracking
    Tensor clone() const;     // deep copy of values (leaf result)

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value);
    static Tensor from(std::vector<int> shape, std::vector<float> values);
    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev,
                        bool requires_grad = false);
};

class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_fn);
    // Populates d loss / d leaf for every requires_grad leaf reachable from
    // loss. Rejects detached losses and a second pass on the same tape.
    void backward(const Tensor& loss);

    static Tape* active();
    size_t size() const { return nodes_.size(); }

private:
    std::vector<std::function<void()>> nodes_;
    bool used_ = false;
    Tape* prev_ = nullptr;
};

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
// adds row vector b (length n) to every row of a (m x n)
Tensor add_row(const Tensor& a, const Tensor& b);
// adds b (N x 3) to every consecutive 3-column block of a (N x 3*blocks)
Tensor add_col_blocks(const Tensor& a, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);     // (m x k)(k x n)
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // (m x k)(n x k)^T

Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor l1(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softmax(const Tensor& a, int axis = 1);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

// weighted mean of -log softmax(logits)[target]; weights select positions
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const Tensor& weights);

Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// out[t] = sum_{u <= t} a[u]  (row-wise prefix sum down axis 0)
Tensor cumsum_rows(const Tensor& a);
Tensor upsample_rows(const Tensor& a, int factor);
// x: T x C -> T' x (C*K), zero padding; column layout [c*K + tap]
Tensor im2col1d(const Tensor& x, int kernel, int stride, int pad);
// w: Cout x (Cin*K), b: Cout
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int kernel,
              int stride, int pad);

struct GumbelSample {
    Tensor soft;  // softmax((logits + g)/tau), differentiable
    Tensor hard;  // one-hot rows; forward value hard, gradient via soft
    std::vector<int> indices;
};
// Row-wise straight-through Gumbel-Softmax over an n x K logit matrix.
GumbelSample gumbel_softmax_st(const Tensor& logits, float temperature, Rng& rng);

}  // namespace ops

struct AdamW {
    std::vector<Tensor> params;
    std::vector<std::vector<float>> m, v;
    int64_t t = 0;
    float beta1 = 0.9f, beta2 = 0.99f, eps = 1e-8f;
    float weight_decay = 0.0f;

    explicit AdamW(std::vector<Tensor> params_, float weight_decay_ = 0.0f);
    void step(float lr);
    void zero_grad();
    // Serialized optimizer slots (m then v per parameter, in order).
    std::vector<float> state_blob() const;
    void load_state_blob(const std::vector<float>& blob);
};

// Linear warm-up to peak learning rate, then flat.
inline float warmup_lr(int64_t step, float peak, int warmup_steps) {
    if (warmup_steps <= 0 || step >= warmup_steps) return peak;
    return peak * static_cast<float>(step + 1) / static_cast<float>(warmup_steps);
}

}  // namespace dmsk
