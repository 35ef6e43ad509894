#pragma once

// Dense numeric kernels. The default entry points run OpenMP-parallel loops;
// kernels::serial holds the single-threaded reference implementations the
// tests compare against. Both sides compute each output element with the
// identical serial inner loop, so results are bit-exact regardless of the
// thread count.

namespace dmsk::kernels {

// c[m x n] = a[m x k] * b[k x n]
void matmul(const float* a, const float* b, float* c, int m, int k, int n);
// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt(const float* a, const float* b, float* c, int m, int k, int n);
// c[m x n] = a[k x m]^T * b[k x n]
void matmul_tn(const float* a, const float* b, float* c, int m, int k, int n);

// Row-wise stable softmax: y[r] = exp(x[r] - max) / sum.
void softmax_rows(const float* x, float* y, int rows, int cols);

// For each of n latents (d floats) find the nearest of K codes by squared
// Euclidean distance; ties resolve to the lower index. dist may be null.
void nearest_code(const float* z, const float* codes, int n, int K, int d,
                  int* idx, float* dist);

namespace serial {
void matmul(const float* a, const float* b, float* c, int m, int k, int n);
void matmul_nt(const float* a, const float* b, float* c, int m, int k, int n);
void matmul_tn(const float* a, const float* b, float* c, int m, int k, int n);
void softmax_rows(const float* x, float* y, int rows, int cols);
void nearest_code(const float* z, const float* codes, int n, int K, int d,
                  int* idx, float* dist);
}  // namespace serial

}  // namespace dmsk::kernels
