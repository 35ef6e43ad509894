#include "dmsk/kernels.hpp"

#include <cmath>

namespace dmsk::kernels {

namespace {

inline void matmul_row(const float* a_row, const float* b, float* c_row, int k, int n) {
    for (int j = 0; j < n; ++j) c_row[j] = 0.0f;
    for (int p = 0; p < k; ++p) {
        const float av = a_row[p];
        if (av == 0.0f) continue;
        const float* b_row = b + static_cast<long>(p) * n;
        for (int j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
}

inline void matmul_nt_row(const float* a_row, const float* b, float* c_row, int k, int n) {
    for (int j = 0; j < n; ++j) {
        const float* b_row = b + static_cast<long>(j) * k;
        float acc = 0.0f;
        for (int p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
        c_row[j] = acc;
    }
}

inline void softmax_row(const float* x, float* y, int cols) {
    float mx = x[0];
    for (int j = 1; j < cols; ++j) mx = x[j] > mx ? x[j] : mx;
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
        const float e = std::exp(x[j] - mx);
        y[j] = e;
        sum += e;
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int j = 0; j < cols; ++j) y[j] *= inv;
}

inline void nearest_one(const float* zr, const float* codes, int K, int d,
                        int* idx, float* dist) {
    int best = 0;
    float best_d = 0.0f;
    for (int l = 0; l < K; ++l) {
        const float* c = codes + static_cast<long>(l) * d;
        float acc = 0.0f;
        for (int p = 0; p < d; ++p) {
            const float diff = zr[p] - c[p];
            acc += diff * diff;
        }
        if (l == 0 || acc < best_d) {
            best = l;
            best_d = acc;
        }
    }
    *idx = best;
    if (dist) *dist = best_d;
}

}  // namespace

void matmul(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n > 16384)
    for (int i = 0; i < m; ++i)
        matmul_row(a + static_cast<long>(i) * k, b, c + static_cast<long>(i) * n, k, n);
}

void matmul_nt(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n > 16384)
    for (int i = 0; i < m; ++i)
        matmul_nt_row(a + static_cast<long>(i) * k, b, c + static_cast<long>(i) * n, k, n);
}

void matmul_tn(const float* a, const float* b, float* c, int m, int k, int n) {
    // a is k x m, c = a^T b. Parallel over output rows; each row scans a column of a.
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n > 16384)
    for (int i = 0; i < m; ++i) {
        float* c_row = c + static_cast<long>(i) * n;
        for (int j = 0; j < n; ++j) c_row[j] = 0.0f;
        for (int p = 0; p < k; ++p) {
            const float av = a[static_cast<long>(p) * m + i];
            if (av == 0.0f) continue;
            const float* b_row = b + static_cast<long>(p) * n;
            for (int j = 0; j < n; ++j) c_row[j] += av * b_row[j];
        }
    }
}

void softmax_rows(const float* x, float* y, int rows, int cols) {
#pragma omp parallel for schedule(static) if (static_cast<long>(rows) * cols > 8192)
    for (int r = 0; r < rows; ++r)
        softmax_row(x + static_cast<long>(r) * cols, y + static_cast<long>(r) * cols, cols);
}

void nearest_code(const float* z, const float* codes, int n, int K, int d,
                  int* idx, float* dist) {
#pragma omp parallel for schedule(static) if (static_cast<long>(n) * K * d > 16384)
    for (int i = 0; i < n; ++i)
        nearest_one(z + static_cast<long>(i) * d, codes, K, d, idx + i,
                    dist ? dist + i : nullptr);
}

namespace serial {

void matmul(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        matmul_row(a + static_cast<long>(i) * k, b, c + static_cast<long>(i) * n, k, n);
}

void matmul_nt(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        matmul_nt_row(a + static_cast<long>(i) * k, b, c + static_cast<long>(i) * n, k, n);
}

void matmul_tn(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        float* c_row = c + static_cast<long>(i) * n;
        for (int j = 0; j < n; ++j) c_row[j] = 0.0f;
        for (int p = 0; p < k; ++p) {
            const float av = a[static_cast<long>(p) * m + i];
            if (av == 0.0f) continue;
            const float* b_row = b + static_cast<long>(p) * n;
            for (int j = 0; j < n; ++j) c_row[j] += av * b_row[j];
        }
    }
}

void softmax_rows(const float* x, float* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r)
        softmax_row(x + static_cast<long>(r) * cols, y + static_cast<long>(r) * cols, cols);
}

void nearest_code(const float* z, const float* codes, int n, int K, int d,
                  int* idx, float* dist) {
    for (int i = 0; i < n; ++i)
        nearest_one(z + static_cast<long>(i) * d, codes, K, d, idx + i,
                    dist ? dist + i : nullptr);
}

}  // namespace serial

}  // namespace dmsk::kernels
