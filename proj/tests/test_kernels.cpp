#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstring>
#include <vector>

#include "doctest.h"
#include "doremi/kernels.hpp"
#include "doremi/rng.hpp"

using namespace doremi;
namespace k = doremi::kernels;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    return v;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("gemm_acc matches a triple-loop oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = rng.uniform_int(1, 9), m = rng.uniform_int(1, 9), kk = rng.uniform_int(1, 17);
        auto a = random_vec(rng, static_cast<std::size_t>(n) * m);
        auto b = random_vec(rng, static_cast<std::size_t>(m) * kk);
        std::vector<double> c(static_cast<std::size_t>(n) * kk, 0.0);
        k::ops().gemm_acc(c.data(), a.data(), b.data(), n, m, kk);

        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < kk; ++j) {
                long double acc = 0.0;
                for (int t = 0; t < m; ++t)
                    acc += static_cast<long double>(a[static_cast<std::size_t>(i) * m + t]) *
                           b[static_cast<std::size_t>(t) * kk + j];
                CHECK(c[static_cast<std::size_t>(i) * kk + j] ==
                      doctest::Approx(static_cast<double>(acc)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("active SIMD backend is bit-identical to the scalar reference") {
    const k::Ops& simd = k::ops();
    const k::Ops& ref = k::scalar_ops();
    INFO("active backend: ", k::backend_name(k::active_backend()));

    Rng rng(22);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = rng.uniform_int(1, 12), m = rng.uniform_int(1, 12),
                  kk = rng.uniform_int(1, 33);
        auto a = random_vec(rng, static_cast<std::size_t>(n) * m);
        auto b = random_vec(rng, static_cast<std::size_t>(m) * kk);
        std::vector<double> c0 = random_vec(rng, static_cast<std::size_t>(n) * kk);
        std::vector<double> c1 = c0;
        ref.gemm_acc(c0.data(), a.data(), b.data(), n, m, kk);
        simd.gemm_acc(c1.data(), a.data(), b.data(), n, m, kk);
        CHECK(bit_equal(c0, c1));
    }

    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 70));
        auto a = random_vec(rng, n);
        auto b = random_vec(rng, n);
        const double alpha = rng.uniform(-2.0, 2.0);

        std::vector<double> r0(n), r1(n);
        ref.add(r0.data(), a.data(), b.data(), n);
        simd.add(r1.data(), a.data(), b.data(), n);
        CHECK(bit_equal(r0, r1));

        ref.sub(r0.data(), a.data(), b.data(), n);
        simd.sub(r1.data(), a.data(), b.data(), n);
        CHECK(bit_equal(r0, r1));

        ref.mul(r0.data(), a.data(), b.data(), n);
        simd.mul(r1.data(), a.data(), b.data(), n);
        CHECK(bit_equal(r0, r1));

        std::vector<double> acc0 = random_vec(rng, n), acc1 = acc0;
        ref.mul_acc(acc0.data(), a.data(), b.data(), n);
        simd.mul_acc(acc1.data(), a.data(), b.data(), n);
        CHECK(bit_equal(acc0, acc1));

        std::vector<double> y0 = random_vec(rng, n), y1 = y0;
        ref.axpy(y0.data(), alpha, a.data(), n);
        simd.axpy(y1.data(), alpha, a.data(), n);
        CHECK(bit_equal(y0, y1));

        std::vector<double> s0 = random_vec(rng, n), s1 = s0;
        ref.scale(s0.data(), alpha, n);
        simd.scale(s1.data(), alpha, n);
        CHECK(bit_equal(s0, s1));
    }

    for (int trial = 0; trial < 20; ++trial) {
        const int n = rng.uniform_int(1, 15), d = rng.uniform_int(1, 40);
        auto row = random_vec(rng, static_cast<std::size_t>(d));
        auto x0 = random_vec(rng, static_cast<std::size_t>(n) * d);
        auto x1 = x0;
        ref.add_row_broadcast(x0.data(), row.data(), n, d);
        simd.add_row_broadcast(x1.data(), row.data(), n, d);
        CHECK(bit_equal(x0, x1));
    }
}

TEST_CASE("backend selection reports availability consistently") {
    CHECK(k::backend_available(k::Backend::scalar));
    const k::Backend original = k::active_backend();
    CHECK(k::set_backend(k::Backend::scalar));
    CHECK(k::active_backend() == k::Backend::scalar);
    CHECK(k::set_backend(original));
    CHECK(k::active_backend() == original);
#if defined(__x86_64__)
    // The build machine gate: if the CPU reports AVX2, dispatch must use it
    // by default (absent an env override).
    if (k::backend_available(k::Backend::avx2) && std::getenv("DOREMI_KERNELS") == nullptr)
        CHECK(original == k::Backend::avx2);
#endif
}
