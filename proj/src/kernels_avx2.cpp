// AVX2 variants. Built with -mavx2 in this TU only; callers reach them
// through the dispatch table after a runtime cpuid check.
//
// Bit-exactness contract: each output element sees the same sequence of
// IEEE mul/add operations as the scalar reference. gemm_acc vectorizes
// across output columns with the m-loop order unchanged, elementwise
// kernels vectorize across independent elements, and no kernel uses FMA.

#include "doremi/kernels.hpp"

#if defined(__AVX2__)
#include <immintrin.h>
#endif

namespace doremi::kernels::avx2 {

#if defined(__AVX2__)

namespace {

void gemm_acc(double* c, const double* a, const double* b, int n, int m, int k) {
    for (int i = 0; i < n; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * k;
        const double* arow = a + static_cast<std::size_t>(i) * m;
        for (int t = 0; t < m; ++t) {
            const double av = arow[t];
            const double* brow = b + static_cast<std::size_t>(t) * k;
            const __m256d avv = _mm256_set1_pd(av);
            int j = 0;
            for (; j + 8 <= k; j += 8) {
                __m256d c0 = _mm256_loadu_pd(crow + j);
                __m256d c1 = _mm256_loadu_pd(crow + j + 4);
                c0 = _mm256_add_pd(c0, _mm256_mul_pd(avv, _mm256_loadu_pd(brow + j)));
                c1 = _mm256_add_pd(c1, _mm256_mul_pd(avv, _mm256_loadu_pd(brow + j + 4)));
                _mm256_storeu_pd(crow + j, c0);
                _mm256_storeu_pd(crow + j + 4, c1);
            }
            for (; j + 4 <= k; j += 4) {
                __m256d c0 = _mm256_loadu_pd(crow + j);
                c0 = _mm256_add_pd(c0, _mm256_mul_pd(avv, _mm256_loadu_pd(brow + j)));
                _mm256_storeu_pd(crow + j, c0);
            }
            for (; j < k; ++j) crow[j] += av * brow[j];
        }
    }
}

void add(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(dst + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(dst + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(dst + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void mul_acc(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d d = _mm256_loadu_pd(dst + i);
        d = _mm256_add_pd(d, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
        _mm256_storeu_pd(dst + i, d);
    }
    for (; i < n; ++i) dst[i] += a[i] * b[i];
}

void axpy(double* y, double alpha, const double* x, std::size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d yv = _mm256_loadu_pd(y + i);
        yv = _mm256_add_pd(yv, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
        _mm256_storeu_pd(y + i, yv);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale(double* y, double alpha, std::size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_mul_pd(av, _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] *= alpha;
}

void add_row_broadcast(double* x, const double* row, int n, int d) {
    for (int i = 0; i < n; ++i) {
        double* xr = x + static_cast<std::size_t>(i) * d;
        int j = 0;
        for (; j + 4 <= d; j += 4)
            _mm256_storeu_pd(xr + j, _mm256_add_pd(_mm256_loadu_pd(xr + j), _mm256_loadu_pd(row + j)));
        for (; j < d; ++j) xr[j] += row[j];
    }
}

}  // namespace

extern const Ops table;
const Ops table{gemm_acc, add, sub, mul, mul_acc, axpy, scale, add_row_broadcast};

bool supported() { return __builtin_cpu_supports("avx2"); }

#else

extern const Ops table;
const Ops table{};
bool supported() { return false; }

#endif  // __AVX2__

}  // namespace doremi::kernels::avx2
