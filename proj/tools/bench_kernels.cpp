// Compares the OpenMP kernels against their serial reference implementations
// and reports throughput and speedup.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dmsk/kernels.hpp"
#include "dmsk/tensor.hpp"

using namespace dmsk;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_ms, double parallel_ms, double gflop) {
    std::printf("%-24s serial %8.2f ms (%6.2f GF/s)   omp %8.2f ms (%6.2f GF/s)   speedup %.2fx\n",
                name, serial_ms, gflop / (serial_ms * 1e-3) * 1e-9, parallel_ms,
                gflop / (parallel_ms * 1e-3) * 1e-9, serial_ms / parallel_ms);
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
    std::printf("built without OpenMP; both columns run serial code\n");
#endif

    Rng rng(42);

    {
        const int m = 384, k = 384, n = 384;
        std::vector<float> a(static_cast<size_t>(m) * k), b(static_cast<size_t>(k) * n),
            c1(static_cast<size_t>(m) * n), c2(c1.size());
        for (float& v : a) v = rng.normal();
        for (float& v : b) v = rng.normal();
        const double flops = 2.0 * m * k * n;
        const double ts = time_ms([&] { kernels::serial::matmul(a.data(), b.data(), c1.data(), m, k, n); }, 5);
        const double tp = time_ms([&] { kernels::matmul(a.data(), b.data(), c2.data(), m, k, n); }, 5);
        report("matmul 384^3", ts, tp, flops);
        if (std::memcmp(c1.data(), c2.data(), c1.size() * 4) != 0)
            std::printf("  MISMATCH between serial and omp matmul!\n");
    }
    {
        const int rows = 4096, cols = 512;
        std::vector<float> x(static_cast<size_t>(rows) * cols), y1(x.size()), y2(x.size());
        for (float& v : x) v = rng.normal() * 4.0f;
        const double flops = 3.0 * rows * cols;
        const double ts = time_ms([&] { kernels::serial::softmax_rows(x.data(), y1.data(), rows, cols); }, 10);
        const double tp = time_ms([&] { kernels::softmax_rows(x.data(), y2.data(), rows, cols); }, 10);
        report("softmax 4096x512", ts, tp, flops);
        if (std::memcmp(y1.data(), y2.data(), y1.size() * 4) != 0)
            std::printf("  MISMATCH between serial and omp softmax!\n");
    }
    {
        const int n = 2048, K = 512, d = 64;
        std::vector<float> z(static_cast<size_t>(n) * d), codes(static_cast<size_t>(K) * d);
        std::vector<int> i1(n), i2(n);
        for (float& v : z) v = rng.normal();
        for (float& v : codes) v = rng.normal();
        const double flops = 3.0 * n * K * d;
        const double ts = time_ms([&] { kernels::serial::nearest_code(z.data(), codes.data(), n, K, d, i1.data(), nullptr); }, 5);
        const double tp = time_ms([&] { kernels::nearest_code(z.data(), codes.data(), n, K, d, i2.data(), nullptr); }, 5);
        report("nearest 2048x512x64", ts, tp, flops);
        if (std::memcmp(i1.data(), i2.data(), i1.size() * 4) != 0)
            std::printf("  MISMATCH between serial and omp nearest_code!\n");
    }
    return 0;
}
