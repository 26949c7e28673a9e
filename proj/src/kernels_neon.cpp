// NEON (aarch64) variants, mirroring the AVX2 file at 2-wide f64.
// Same bit-exactness contract: vectorize across output elements only,
// mul/add kept separate.

#include "doremi/kernels.hpp"

#if defined(__aarch64__)
#include <arm_neon.h>
#endif

namespace doremi::kernels::neon {

#if defined(__aarch64__)

namespace {

void gemm_acc(double* c, const double* a, const double* b, int n, int m, int k) {
    for (int i = 0; i < n; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * k;
        const double* arow = a + static_cast<std::size_t>(i) * m;
        for (int t = 0; t < m; ++t) {
            const double av = arow[t];
            const double* brow = b + static_cast<std::size_t>(t) * k;
            const float64x2_t avv = vdupq_n_f64(av);
            int j = 0;
            for (; j + 2 <= k; j += 2) {
                float64x2_t cv = vld1q_f64(crow + j);
                cv = vaddq_f64(cv, vmulq_f64(avv, vld1q_f64(brow + j)));
                vst1q_f64(crow + j, cv);
            }
            for (; j < k; ++j) crow[j] += av * brow[j];
        }
    }
}

void add(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void mul_acc(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t d = vld1q_f64(dst + i);
        d = vaddq_f64(d, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
        vst1q_f64(dst + i, d);
    }
    for (; i < n; ++i) dst[i] += a[i] * b[i];
}

void axpy(double* y, double alpha, const double* x, std::size_t n) {
    const float64x2_t av = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t yv = vld1q_f64(y + i);
        yv = vaddq_f64(yv, vmulq_f64(av, vld1q_f64(x + i)));
        vst1q_f64(y + i, yv);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale(double* y, double alpha, std::size_t n) {
    const float64x2_t av = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vmulq_f64(av, vld1q_f64(y + i)));
    for (; i < n; ++i) y[i] *= alpha;
}

void add_row_broadcast(double* x, const double* row, int n, int d) {
    for (int i = 0; i < n; ++i) {
        double* xr = x + static_cast<std::size_t>(i) * d;
        int j = 0;
        for (; j + 2 <= d; j += 2) vst1q_f64(xr + j, vaddq_f64(vld1q_f64(xr + j), vld1q_f64(row + j)));
        for (; j < d; ++j) xr[j] += row[j];
    }
}

}  // namespace

extern const Ops table;
const Ops table{gemm_acc, add, sub, mul, mul_acc, axpy, scale, add_row_broadcast};

bool supported() { return true; }

#else

extern const Ops table;
const Ops table{};
bool supported() { return false; }

#endif  // __aarch64__

}  // namespace doremi::kernels::neon
