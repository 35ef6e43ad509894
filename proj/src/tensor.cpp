#include "dmsk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dmsk/kernels.hpp"

namespace dmsk {

namespace {
thread_local Tape* g_active_tape = nullptr;

std::shared_ptr<std::vector<float>> make_storage(size_t n, float fill = 0.0f) {
    return std::make_shared<std::vector<float>>(n, fill);
}
}  // namespace

float Tensor::scalar() const {
    if (numel() != 1) throw DimensionError("scalar() on non-scalar tensor");
    return (*data)[0];
}

void Tensor::set_requires_grad() {
    requires_grad = true;
    if (!grad) grad = make_storage(numel());
}

void Tensor::zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0f);
}

Tensor Tensor::detached() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<float>>(*data);
    return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = make_storage(t.numel());
    if (requires_grad) t.set_requires_grad();
    return t;
}

Tensor Tensor::full(std::vector<int> shape, float value) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = make_storage(t.numel(), value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values) {
    Tensor t;
    t.shape = std::move(shape);
    if (static_cast<int>(values.size()) != t.numel())
        throw DimensionError("from(): value count does not match shape");
    t.data = std::make_shared<std::vector<float>>(std::move(values));
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (float& v : *t.data) v = rng.normal() * stddev;
    return t;
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    if (used_) throw TapeError("backward() called twice on the same tape");
    if (loss.tape != this || !loss.grad)
        throw TapeError("loss is not attached to this tape");
    if (loss.numel() != 1) throw DimensionError("backward() expects a scalar loss");
    used_ = true;
    (*loss.grad)[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

namespace ops {

namespace {

bool grad_needed(const Tensor& a) { return a.requires_grad && Tape::active(); }

Tensor make_result(std::vector<int> shape, bool need_grad) {
    Tensor t = Tensor::zeros(std::move(shape));
    if (need_grad) {
        t.set_requires_grad();
        t.tape = Tape::active();
    }
    return t;
}

void accumulate(const Tensor& t, const std::vector<float>& delta) {
    float* g = t.grad->data();
    for (size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw DimensionError("add: shape mismatch");
    const bool need = grad_needed(a) || grad_needed(b);
    Tensor out = make_result(a.shape, need);
    const int n = a.numel();
    const float* pa = a.ptr();
    const float* pb = b.ptr();
    float* po = out.ptr();
    for (int i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (need) {
        Tape::active()->record([a, b, out] {
            const float* g = out.grad->data();
            const int m = out.numel();
            if (a.requires_grad)
                for (int i = 0; i < m; ++i) (*a.grad)[i] += g[i];
            if (b.requires_grad)
                for (int i = 0; i < m; ++i) (*b.grad)[i] += g[i];
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw DimensionError("sub: shape mismatch");
    const bool need = grad_needed(a) || grad_needed(b);
    Tensor out = make_result(a.shape, need);
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    if (need) {
        Tape::active()->record([a, b, out] {
            const float* g = out.grad->data();
            const int m = out.numel();
            if (a.requires_grad)
                for (int i = 0; i < m; ++i) (*a.grad)[i] += g[i];
            if (b.requires_grad)
                for (int i = 0; i < m; ++i) (*b.grad)[i] -= g[i];
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw DimensionError("mul: shape mismatch");
    const bool need = grad_needed(a) || grad_needed(b);
    Tensor out = make_result(a.shape, need);
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    if (need) {
        Tape::active()->record([a, b, out] {
            const float* g = out.grad->data();
            const int m = out.numel();
            if (a.requires_grad)
                for (int i = 0; i < m; ++i) (*a.grad)[i] += g[i] * b.at(i);
            if (b.requires_grad)
                for (int i = 0; i < m; ++i) (*b.grad)[i] += g[i] * a.at(i);
        });
    }
    return out;
}

Tensor scale(const Tensor& a, float s) {
    const bool need = grad_needed(a);
    Tensor out = make_result(a.shape, need);
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.at(i) = a.at(i) * s;
    if (need) {
        Tape::active()->record([a, out, s] {
            const float* g = out.grad->data();
            const int m = out.numel();
            for (int i = 0; i < m; ++i) (*a.grad)[i] += g[i] * s;
        });
    }
    return out;
}

Tensor add_row(const Tensor& a, const Tensor& b) {
    if (b.numel() != a.cols()) throw DimensionError("add_row: width mismatch");
    const bool need = grad_needed(a) || grad_needed(b);
    Tensor out = make_result(a.shape, need);
    const int r = a.rows(), c = a.cols();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) = a.at(i, j) + b.at(j);
    if (need) {
        Tape::active()->record([a, b, out, r, c] {
            if (a.requires_grad)
                for (int i = 0; i < r * c; ++i) (*a.grad)[i] += (*out.grad)[i];
            if (b.requires_grad)
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        (*b.grad)[j] += (*out.grad)[static_cast<size_t>(i) * c + j];
        });
    }
    return out;
}

Tensor add_col_blocks(const Tensor& a, const Tensor& b) {
    const int r = a.rows(), c = a.cols();
    if (b.rows() != r || b.cols() != 3 || c % 3 != 0)
        throw DimensionError("add_col_blocks: expects a: N x 3B, b: N x 3");
    const int blocks = c / 3;
    const bool need = grad_needed(a) || grad_needed(b);
    Tensor out = make_result(a.shape, need);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < blocks; ++j)
            for (int k = 0; k < 3; ++k)
                out.at(i, 3 * j + k) = a.at(i, 3 * j + k) + b.at(i, k);
    if (need) {
        Tape::active()->record([a, b, out, r, blocks] {
            if (a.requires_grad)
                for (int i = 0; i < out.numel(); ++i) (*a.grad)[i] += (*out.grad)[i];
            if (b.requires_grad)
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < blocks; ++j)
                        for (int k = 0; k < 3; ++k)
                            (*b.grad)[static_cast<size_t>(i) * 3 + k] +=
                                (*out.grad)[static_cast<size_t>(i) * blocks * 3 + 3 * j + k];
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.cols() != b.rows())
        throw DimensionError("matmul: inner extents do not match");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    const bool need = grad_needed(a) || grad_needed(b);
    Tensor out = make_result({m, n}, need);
    kernels::matmul(a.ptr(), b.ptr(), out.ptr(), m, k, n);
    if (need) {
        Tape::active()->record([a, b, out, m, k, n] {
            if (a.requires_grad) {
                std::vector<float> da(static_cast<size_t>(m) * k);
                kernels::matmul_nt(out.grad->data(), b.ptr(), da.data(), m, n, k);
                accumulate(a, da);
            }
            if (b.requires_grad) {
                std::vector<float> db(static_cast<size_t>(k) * n);
                kernels::matmul_tn(a.ptr(), out.grad->data(), db.data(), k, m, n);
                accumulate(b, db);
            }
        });
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.cols() != b.cols())
        throw DimensionError("matmul_nt: shared extents do not match");
    const int m = a.rows(), k = a.cols(), n = b.rows();
    const bool need = grad_needed(a) || grad_needed(b);
    Tensor out = make_result({m, n}, need);
    kernels::matmul_nt(a.ptr(), b.ptr(), out.ptr(), m, k, n);
    if (need) {
        Tape::active()->record([a, b, out, m, k, n] {
            if (a.requires_grad) {
                std::vector<float> da(static_cast<size_t>(m) * k);
                kernels::matmul(out.grad->data(), b.ptr(), da.data(), m, n, k);
                accumulate(a, da);
            }
            if (b.requires_grad) {
                std::vector<float> db(static_cast<size_t>(n) * k);
                kernels::matmul_tn(out.grad->data(), a.ptr(), db.data(), n, m, k);
                accumulate(b, db);
            }
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
    if (c0 < 0 || c1 > a.cols() || c0 >= c1) throw DimensionError("slice_cols: bad range");
    const int r = a.rows(), c = a.cols(), w = c1 - c0;
    const bool need = grad_needed(a);
    Tensor out = make_result({r, w}, need);
    for (int i = 0; i < r; ++i)
        std::memcpy(out.ptr() + static_cast<size_t>(i) * w,
                    a.ptr() + static_cast<size_t>(i) * c + c0, sizeof(float) * w);
    if (need) {
        Tape::active()->record([a, out, r, c, w, c0] {
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < w; ++j)
                    (*a.grad)[static_cast<size_t>(i) * c + c0 + j] +=
                        (*out.grad)[static_cast<size_t>(i) * w + j];
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
    if (r0 < 0 || r1 > a.rows() || r0 >= r1) throw DimensionError("slice_rows: bad range");
    const int c = a.cols(), h = r1 - r0;
    const bool need = grad_needed(a);
    Tensor out = make_result({h, c}, need);
    std::memcpy(out.ptr(), a.ptr() + static_cast<size_t>(r0) * c, sizeof(float) * h * c);
    if (need) {
        Tape::active()->record([a, out, r0, c, h] {
            for (int i = 0; i < h * c; ++i)
                (*a.grad)[static_cast<size_t>(r0) * c + i] += (*out.grad)[i];
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: empty");
    const int r = parts[0].rows();
    int total = 0;
    bool need = false;
    for (const Tensor& p : parts) {
        if (p.rows() != r) throw DimensionError("concat_cols: row mismatch");
        total += p.cols();
        need = need || grad_needed(p);
    }
    Tensor out = make_result({r, total}, need);
    int off = 0;
    for (const Tensor& p : parts) {
        const int w = p.cols();
        for (int i = 0; i < r; ++i)
            std::memcpy(out.ptr() + static_cast<size_t>(i) * total + off,
                        p.ptr() + static_cast<size_t>(i) * w, sizeof(float) * w);
        off += w;
    }
    if (need) {
        std::vector<Tensor> held = parts;
        Tape::active()->record([held, out, r, total] {
            int off2 = 0;
            for (const Tensor& p : held) {
                const int w = p.cols();
                if (p.requires_grad)
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < w; ++j)
                            (*p.grad)[static_cast<size_t>(i) * w + j] +=
                                (*out.grad)[static_cast<size_t>(i) * total + off2 + j];
                off2 += w;
            }
        });
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: empty");
    const int c = parts[0].cols();
    int total = 0;
    bool need = false;
    for (const Tensor& p : parts) {
        if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
        total += p.rows();
        need = need || grad_needed(p);
    }
    Tensor out = make_result({total, c}, need);
    int off = 0;
    for (const Tensor& p : parts) {
        std::memcpy(out.ptr() + static_cast<size_t>(off) * c, p.ptr(),
                    sizeof(float) * p.numel());
        off += p.rows();
    }
    if (need) {
        std::vector<Tensor> held = parts;
        Tape::active()->record([held, out, c] {
            int off2 = 0;
            for (const Tensor& p : held) {
                if (p.requires_grad)
                    for (int i = 0; i < p.numel(); ++i)
                        (*p.grad)[i] += (*out.grad)[static_cast<size_t>(off2) * c + i];
                off2 += p.rows();
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& a) {
    const bool need = grad_needed(a);
    Tensor out = make_result({1}, need);
    double acc = 0.0;
    for (int i = 0; i < a.numel(); ++i) acc += a.at(i);
    out.at(0) = static_cast<float>(acc);
    if (need) {
        Tape::active()->record([a, out] {
            const float g = (*out.grad)[0];
            for (int i = 0; i < a.numel(); ++i) (*a.grad)[i] += g;
        });
    }
    return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0f / static_cast<float>(a.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw DimensionError("mse: shape mismatch");
    const bool need = grad_needed(a) || grad_needed(b);
    Tensor out = make_result({1}, need);
    const int n = a.numel();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = static_cast<double>(a.at(i)) - b.at(i);
        acc += d * d;
    }
    out.at(0) = static_cast<float>(acc / n);
    if (need) {
        Tape::active()->record([a, b, out, n] {
            const float g = (*out.grad)[0] * 2.0f / static_cast<float>(n);
            for (int i = 0; i < n; ++i) {
                const float d = a.at(i) - b.at(i);
                if (a.requires_grad) (*a.grad)[i] += g * d;
                if (b.requires_grad) (*b.grad)[i] -= g * d;
            }
        });
    }
    return out;
}

Tensor l1(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw DimensionError("l1: shape mismatch");
    const bool need = grad_needed(a) || grad_needed(b);
    Tensor out = make_result({1}, need);
    const int n = a.numel();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += std::fabs(static_cast<double>(a.at(i)) - b.at(i));
    out.at(0) = static_cast<float>(acc / n);
    if (need) {
        Tape::active()->record([a, b, out, n] {
            const float g = (*out.grad)[0] / static_cast<float>(n);
            for (int i = 0; i < n; ++i) {
                const float d = a.at(i) - b.at(i);
                const float s = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
                if (a.requires_grad) (*a.grad)[i] += g * s;
                if (b.requires_grad) (*b.grad)[i] -= g * s;
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& a) {
    const bool need = grad_needed(a);
    Tensor out = make_result(a.shape, need);
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.at(i) = a.at(i) > 0.0f ? a.at(i) : 0.0f;
    if (need) {
        Tape::active()->record([a, out, n] {
            for (int i = 0; i < n; ++i)
                if (a.at(i) > 0.0f) (*a.grad)[i] += (*out.grad)[i];
        });
    }
    return out;
}

Tensor gelu(const Tensor& a) {
    const bool need = grad_needed(a);
    Tensor out = make_result(a.shape, need);
    const int n = a.numel();
    constexpr float kAlpha = 0.7978845608028654f;  // sqrt(2/pi)
    constexpr float kBeta = 0.044715f;
    for (int i = 0; i < n; ++i) {
        const float x = a.at(i);
        const float t = std::tanh(kAlpha * (x + kBeta * x * x * x));
        out.at(i) = 0.5f * x * (1.0f + t);
    }
    if (need) {
        Tape::active()->record([a, out, n] {
            constexpr float alpha = 0.7978845608028654f;
            constexpr float beta = 0.044715f;
            for (int i = 0; i < n; ++i) {
                const float x = a.at(i);
                const float u = alpha * (x + beta * x * x * x);
                const float t = std::tanh(u);
                const float du = alpha * (1.0f + 3.0f * beta * x * x);
                const float d = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
                (*a.grad)[i] += (*out.grad)[i] * d;
            }
        });
    }
    return out;
}

Tensor softmax(const Tensor& a, int axis) {
    if (a.shape.size() > 2) throw DimensionError("softmax: expects 1-D or 2-D");
    for (int i = 0; i < a.numel(); ++i)
        if (std::isnan(a.at(i))) throw NumericError("softmax: NaN input");
    const bool need = grad_needed(a);
    Tensor out = make_result(a.shape, need);
    const int r = a.rows(), c = a.shape.size() < 2 ? a.shape[0] : a.cols();
    const int rows = a.shape.size() < 2 ? 1 : r;
    if (axis == 1 || a.shape.size() < 2) {
        kernels::softmax_rows(a.ptr(), out.ptr(), rows, c);
    } else {
        // column-wise: softmax over each column independently
        for (int j = 0; j < c; ++j) {
            float mx = a.at(0, j);
            for (int i = 1; i < r; ++i) mx = std::max(mx, a.at(i, j));
            double s = 0.0;
            for (int i = 0; i < r; ++i) {
                const float e = std::exp(a.at(i, j) - mx);
                out.at(i, j) = e;
                s += e;
            }
            const float inv = static_cast<float>(1.0 / s);
            for (int i = 0; i < r; ++i) out.at(i, j) *= inv;
        }
    }
    if (need) {
        const int ax = a.shape.size() < 2 ? 1 : axis;
        Tape::active()->record([a, out, ax] {
            const int rr = out.shape.size() < 2 ? 1 : out.rows();
            const int cc = out.shape.size() < 2 ? out.shape[0] : out.cols();
            if (ax == 1) {
                for (int i = 0; i < rr; ++i) {
                    const float* y = out.ptr() + static_cast<size_t>(i) * cc;
                    const float* gy = out.grad->data() + static_cast<size_t>(i) * cc;
                    double dot = 0.0;
                    for (int j = 0; j < cc; ++j) dot += static_cast<double>(y[j]) * gy[j];
                    for (int j = 0; j < cc; ++j)
                        (*a.grad)[static_cast<size_t>(i) * cc + j] +=
                            y[j] * (gy[j] - static_cast<float>(dot));
                }
            } else {
                for (int j = 0; j < cc; ++j) {
                    double dot = 0.0;
                    for (int i = 0; i < rr; ++i)
                        dot += static_cast<double>(out.at(i, j)) *
                               (*out.grad)[static_cast<size_t>(i) * cc + j];
                    for (int i = 0; i < rr; ++i)
                        (*a.grad)[static_cast<size_t>(i) * cc + j] +=
                            out.at(i, j) * ((*out.grad)[static_cast<size_t>(i) * cc + j] -
                                            static_cast<float>(dot));
                }
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    const int r = x.rows(), c = x.cols();
    if (gamma.numel() != c || beta.numel() != c)
        throw DimensionError("layer_norm: gamma/beta width mismatch");
    const bool need = grad_needed(x) || grad_needed(gamma) || grad_needed(beta);
    Tensor out = make_result(x.shape, need);
    auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(r) * c);
    auto inv_sigma = std::make_shared<std::vector<float>>(r);
    for (int i = 0; i < r; ++i) {
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += x.at(i, j);
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = x.at(i, j) - mu;
            var += d * d;
        }
        var /= c;
        const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        (*inv_sigma)[i] = is;
        for (int j = 0; j < c; ++j) {
            const float xh = (x.at(i, j) - static_cast<float>(mu)) * is;
            (*xhat)[static_cast<size_t>(i) * c + j] = xh;
            out.at(i, j) = xh * gamma.at(j) + beta.at(j);
        }
    }
    if (need) {
        Tape::active()->record([x, gamma, beta, out, xhat, inv_sigma, r, c] {
            for (int i = 0; i < r; ++i) {
                const float* gy = out.grad->data() + static_cast<size_t>(i) * c;
                const float* xh = xhat->data() + static_cast<size_t>(i) * c;
                if (gamma.requires_grad)
                    for (int j = 0; j < c; ++j) (*gamma.grad)[j] += gy[j] * xh[j];
                if (beta.requires_grad)
                    for (int j = 0; j < c; ++j) (*beta.grad)[j] += gy[j];
                if (x.requires_grad) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < c; ++j) {
                        const float gg = gy[j] * gamma.at(j);
                        m1 += gg;
                        m2 += static_cast<double>(gg) * xh[j];
                    }
                    m1 /= c;
                    m2 /= c;
                    const float is = (*inv_sigma)[i];
                    for (int j = 0; j < c; ++j) {
                        const float gg = gy[j] * gamma.at(j);
                        (*x.grad)[static_cast<size_t>(i) * c + j] +=
                            is * (gg - static_cast<float>(m1) -
                                  xh[j] * static_cast<float>(m2));
                    }
                }
            }
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const Tensor& weights) {
    const int n = logits.rows(), K = logits.cols();
    if (static_cast<int>(targets.size()) != n || weights.numel() != n)
        throw DimensionError("cross_entropy: target/weight count mismatch");
    double wsum = 0.0;
    for (int i = 0; i < n; ++i) {
        if (targets[i] < 0 || targets[i] >= K)
            throw DataError("cross_entropy: target out of range");
        if (weights.at(i) < 0.0f) throw DataError("cross_entropy: negative weight");
        wsum += weights.at(i);
    }
    if (wsum == 0.0) throw DataError("cross_entropy: all weights zero (degenerate loss)");
    const bool need = grad_needed(logits);
    Tensor out = make_result({1}, need);
    auto lse = std::make_shared<std::vector<float>>(n);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const float* row = logits.ptr() + static_cast<size_t>(i) * K;
        float mx = row[0];
        for (int j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < K; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
        const double l = mx + std::log(s);
        (*lse)[i] = static_cast<float>(l);
        loss += weights.at(i) * (l - row[targets[i]]);
    }
    out.at(0) = static_cast<float>(loss / wsum);
    if (need) {
        auto tgt = std::make_shared<std::vector<int>>(targets);
        const float inv_wsum = static_cast<float>(1.0 / wsum);
        Tape::active()->record([logits, weights, out, lse, tgt, n, K, inv_wsum] {
            const float g = (*out.grad)[0] * inv_wsum;
            for (int i = 0; i < n; ++i) {
                const float w = weights.at(i);
                if (w == 0.0f) continue;
                const float* row = logits.ptr() + static_cast<size_t>(i) * K;
                float* gr = logits.grad->data() + static_cast<size_t>(i) * K;
                const float l = (*lse)[i];
                for (int j = 0; j < K; ++j) {
                    const float p = std::exp(row[j] - l);
                    const float onehot = j == (*tgt)[i] ? 1.0f : 0.0f;
                    gr[j] += g * w * (p - onehot);
                }
            }
        });
    }
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    const int R = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= R) throw DataError("embedding: id out of range");
    const int n = static_cast<int>(ids.size());
    const bool need = grad_needed(table);
    Tensor out = make_result({n, d}, need);
    for (int i = 0; i < n; ++i)
        std::memcpy(out.ptr() + static_cast<size_t>(i) * d,
                    table.ptr() + static_cast<size_t>(ids[i]) * d, sizeof(float) * d);
    if (need) {
        auto held = std::make_shared<std::vector<int>>(ids);
        Tape::active()->record([table, out, held, n, d] {
            for (int i = 0; i < n; ++i) {
                float* dst = table.grad->data() + static_cast<size_t>((*held)[i]) * d;
                const float* src = out.grad->data() + static_cast<size_t>(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor cumsum_rows(const Tensor& a) {
    const int r = a.rows(), c = a.cols();
    const bool need = grad_needed(a);
    Tensor out = make_result(a.shape, need);
    for (int j = 0; j < c; ++j) {
        float acc = 0.0f;
        for (int i = 0; i < r; ++i) {
            acc += a.at(i, j);
            out.at(i, j) = acc;
        }
    }
    if (need) {
        Tape::active()->record([a, out, r, c] {
            for (int j = 0; j < c; ++j) {
                float acc = 0.0f;
                for (int i = r - 1; i >= 0; --i) {
                    acc += (*out.grad)[static_cast<size_t>(i) * c + j];
                    (*a.grad)[static_cast<size_t>(i) * c + j] += acc;
                }
            }
        });
    }
    return out;
}

Tensor upsample_rows(const Tensor& a, int factor) {
    if (factor < 1) throw ParameterError("upsample_rows: factor must be >= 1");
    const int r = a.rows(), c = a.cols();
    const bool need = grad_needed(a);
    Tensor out = make_result({r * factor, c}, need);
    for (int i = 0; i < r; ++i)
        for (int f = 0; f < factor; ++f)
            std::memcpy(out.ptr() + static_cast<size_t>(i * factor + f) * c,
                        a.ptr() + static_cast<size_t>(i) * c, sizeof(float) * c);
    if (need) {
        Tape::active()->record([a, out, r, c, factor] {
            for (int i = 0; i < r; ++i)
                for (int f = 0; f < factor; ++f)
                    for (int j = 0; j < c; ++j)
                        (*a.grad)[static_cast<size_t>(i) * c + j] +=
                            (*out.grad)[static_cast<size_t>(i * factor + f) * c + j];
        });
    }
    return out;
}

Tensor im2col1d(const Tensor& x, int kernel, int stride, int pad) {
    const int T = x.rows(), C = x.cols();
    const int To = (T + 2 * pad - kernel) / stride + 1;
    if (To < 1) throw DimensionError("im2col1d: sequence too short");
    const bool need = grad_needed(x);
    Tensor out = make_result({To, C * kernel}, need);
    for (int t = 0; t < To; ++t)
        for (int c = 0; c < C; ++c)
            for (int k = 0; k < kernel; ++k) {
                const int src = t * stride + k - pad;
                out.at(t, c * kernel + k) =
                    (src >= 0 && src < T) ? x.at(src, c) : 0.0f;
            }
    if (need) {
        Tape::active()->record([x, out, T, C, To, kernel, stride, pad] {
            for (int t = 0; t < To; ++t)
                for (int c = 0; c < C; ++c)
                    for (int k = 0; k < kernel; ++k) {
                        const int src = t * stride + k - pad;
                        if (src >= 0 && src < T)
                            (*x.grad)[static_cast<size_t>(src) * C + c] +=
                                (*out.grad)[static_cast<size_t>(t) * C * kernel +
                                            c * kernel + k];
                    }
        });
    }
    return out;
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int kernel,
              int stride, int pad) {
    if (w.cols() != x.cols() * kernel) throw DimensionError("conv1d: weight width mismatch");
    Tensor cols = im2col1d(x, kernel, stride, pad);
    return add_row(matmul_nt(cols, w), b);
}

GumbelSample gumbel_softmax_st(const Tensor& logits, float temperature, Rng& rng) {
    if (temperature <= 0.0f) throw ParameterError("gumbel_softmax_st: temperature must be > 0");
    const int n = logits.shape.size() < 2 ? 1 : logits.rows();
    const int K = logits.shape.size() < 2 ? logits.shape[0] : logits.cols();
    const bool need = grad_needed(logits);

    GumbelSample s;
    s.soft = make_result(logits.shape, need);
    s.hard = make_result(logits.shape, need);
    s.indices.resize(n);

    std::vector<float> noisy(static_cast<size_t>(n) * K);
    for (size_t i = 0; i < noisy.size(); ++i)
        noisy[i] = (logits.at(static_cast<int>(i)) + rng.gumbel()) / temperature;
    kernels::softmax_rows(noisy.data(), s.soft.ptr(), n, K);
    for (int i = 0; i < n; ++i) {
        const float* row = s.soft.ptr() + static_cast<size_t>(i) * K;
        int best = 0;
        for (int j = 1; j < K; ++j)
            if (row[j] > row[best]) best = j;
        s.indices[i] = best;
        s.hard.ptr()[static_cast<size_t>(i) * K + best] = 1.0f;
    }
    if (need) {
        // Both outputs backpropagate through the soft distribution (straight-through).
        const float inv_t = 1.0f / temperature;
        Tensor soft = s.soft, hard = s.hard;
        Tape::active()->record([logits, soft, hard, n, K, inv_t] {
            for (int i = 0; i < n; ++i) {
                const float* y = soft.ptr() + static_cast<size_t>(i) * K;
                const float* gs = soft.grad->data() + static_cast<size_t>(i) * K;
                const float* gh = hard.grad->data() + static_cast<size_t>(i) * K;
                double dot = 0.0;
                for (int j = 0; j < K; ++j)
                    dot += static_cast<double>(y[j]) * (gs[j] + gh[j]);
                for (int j = 0; j < K; ++j)
                    (*logits.grad)[static_cast<size_t>(i) * K + j] +=
                        inv_t * y[j] * (gs[j] + gh[j] - static_cast<float>(dot));
            }
        });
    }
    return s;
}

}  // namespace ops

AdamW::AdamW(std::vector<Tensor> params_, float weight_decay_)
    : params(std::move(params_)), weight_decay(weight_decay_) {
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        m[i].assign(params[i].numel(), 0.0f);
        v[i].assign(params[i].numel(), 0.0f);
    }
}

void AdamW::step(float lr) {
    ++t;
    const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t));
    const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (!p.grad) continue;
        float* w = p.ptr();
        const float* g = p.grad->data();
        for (int j = 0; j < p.numel(); ++j) {
            m[i][j] = beta1 * m[i][j] + (1.0f - beta1) * g[j];
            v[i][j] = beta2 * v[i][j] + (1.0f - beta2) * g[j] * g[j];
            const float mh = m[i][j] / bc1;
            const float vh = v[i][j] / bc2;
            w[j] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * w[j]);
        }
    }
}

void AdamW::zero_grad() {
    for (Tensor& p : params) p.zero_grad();
}

std::vector<float> AdamW::state_blob() const {
    std::vector<float> blob;
    blob.push_back(static_cast<float>(t));
    for (const auto& mi : m) blob.insert(blob.end(), mi.begin(), mi.end());
    for (const auto& vi : v) blob.insert(blob.end(), vi.begin(), vi.end());
    return blob;
}

void AdamW::load_state_blob(const std::vector<float>& blob) {
    size_t expect = 1;
    for (const auto& mi : m) expect += 2 * mi.size();
    if (blob.size() != expect) throw CheckpointError("optimizer state size mismatch");
    t = static_cast<int64_t>(blob[0]);
    size_t off = 1;
    for (auto& mi : m) {
        std::copy(blob.begin() + off, blob.begin() + off + mi.size(), mi.begin());
        off += mi.size();
    }
    for (auto& vi : v) {
        std::copy(blob.begin() + off, blob.begin() + off + vi.size(), vi.begin());
        off += vi.size();
    }
}

}  // namespace dmsk
