#include <doctest.h>

#include <cstring>
#include <vector>

#include "dmsk/kernels.hpp"
#include "dmsk/tensor.hpp"

using namespace dmsk;

namespace {

std::vector<float> randv(size_t n, Rng& rng) {
    std::vector<float> v(n);
    for (float& x : v) x = rng.normal();
    return v;
}

}  // namespace

TEST_CASE("omp kernels match the serial reference bit-exactly") {
    Rng rng(11);
    const int shapes[][3] = {{1, 1, 1}, {3, 7, 5}, {64, 33, 17}, {129, 128, 130}};
    for (const auto& s : shapes) {
        const int m = s[0], k = s[1], n = s[2];
        const std::vector<float> a = randv(static_cast<size_t>(m) * k, rng);
        const std::vector<float> b = randv(static_cast<size_t>(k) * n, rng);
        std::vector<float> c1(static_cast<size_t>(m) * n), c2(c1.size());

        kernels::serial::matmul(a.data(), b.data(), c1.data(), m, k, n);
        kernels::matmul(a.data(), b.data(), c2.data(), m, k, n);
        CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * 4) == 0);

        const std::vector<float> bt = randv(static_cast<size_t>(n) * k, rng);
        kernels::serial::matmul_nt(a.data(), bt.data(), c1.data(), m, k, n);
        kernels::matmul_nt(a.data(), bt.data(), c2.data(), m, k, n);
        CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * 4) == 0);

        const std::vector<float> at = randv(static_cast<size_t>(k) * m, rng);
        const std::vector<float> bb = randv(static_cast<size_t>(k) * n, rng);
        kernels::serial::matmul_tn(at.data(), bb.data(), c1.data(), m, k, n);
        kernels::matmul_tn(at.data(), bb.data(), c2.data(), m, k, n);
        CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * 4) == 0);
    }
}

TEST_CASE("omp softmax and nearest-code match serial") {
    Rng rng(12);
    const std::vector<float> x = randv(300 * 40, rng);
    std::vector<float> y1(x.size()), y2(x.size());
    kernels::serial::softmax_rows(x.data(), y1.data(), 300, 40);
    kernels::softmax_rows(x.data(), y2.data(), 300, 40);
    CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * 4) == 0);

    const std::vector<float> z = randv(500 * 16, rng);
    const std::vector<float> codes = randv(64 * 16, rng);
    std::vector<int> i1(500), i2(500);
    std::vector<float> d1(500), d2(500);
    kernels::serial::nearest_code(z.data(), codes.data(), 500, 64, 16, i1.data(), d1.data());
    kernels::nearest_code(z.data(), codes.data(), 500, 64, 16, i2.data(), d2.data());
    CHECK(i1 == i2);
    CHECK(std::memcmp(d1.data(), d2.data(), d1.size() * 4) == 0);
}

TEST_CASE("matmul_tn transposes correctly") {
    // a (2x3) read as k x m with k=2, m=3; c = a^T b
    const std::vector<float> a = {1, 2, 3, 4, 5, 6};  // rows: [1,2,3],[4,5,6]
    const std::vector<float> b = {1, 0, 0, 1};        // 2x2 identity
    std::vector<float> c(3 * 2);
    kernels::serial::matmul_tn(a.data(), b.data(), c.data(), 3, 2, 2);
    const std::vector<float> want = {1, 4, 2, 5, 3, 6};
    CHECK(c == want);
}
