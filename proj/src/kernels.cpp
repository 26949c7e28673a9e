#include "doremi/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace doremi::kernels {

namespace scalar {

void gemm_acc(double* c, const double* a, const double* b, int n, int m, int k) {
    for (int i = 0; i < n; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * k;
        const double* arow = a + static_cast<std::size_t>(i) * m;
        for (int t = 0; t < m; ++t) {
            const double av = arow[t];
            const double* brow = b + static_cast<std::size_t>(t) * k;
            for (int j = 0; j < k; ++j) crow[j] += av * brow[j];
        }
    }
}

void add(double* dst, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub(double* dst, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul(double* dst, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}

void mul_acc(double* dst, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
}

void axpy(double* y, double alpha, const double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale(double* y, double alpha, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] *= alpha;
}

void add_row_broadcast(double* x, const double* row, int n, int d) {
    for (int i = 0; i < n; ++i) {
        double* xr = x + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) xr[j] += row[j];
    }
}

}  // namespace scalar

#if DOREMI_HAVE_AVX2_TU
namespace avx2 {
extern const Ops table;
bool supported();
}  // namespace avx2
#endif
#if DOREMI_HAVE_NEON_TU
namespace neon {
extern const Ops table;
bool supported();
}  // namespace neon
#endif

namespace {

const Ops kScalarOps{
    scalar::gemm_acc, scalar::add,  scalar::sub,   scalar::mul,
    scalar::mul_acc,  scalar::axpy, scalar::scale, scalar::add_row_broadcast,
};

struct Dispatch {
    const Ops* ops = &kScalarOps;
    Backend backend = Backend::scalar;
};

Backend pick_default() {
    if (const char* env = std::getenv("DOREMI_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
        if (std::strcmp(env, "avx2") == 0 && backend_available(Backend::avx2)) return Backend::avx2;
        if (std::strcmp(env, "neon") == 0 && backend_available(Backend::neon)) return Backend::neon;
        return Backend::scalar;
    }
    if (backend_available(Backend::avx2)) return Backend::avx2;
    if (backend_available(Backend::neon)) return Backend::neon;
    return Backend::scalar;
}

Dispatch& dispatch_slot() {
    static Dispatch d;
    return d;
}

}  // namespace

bool backend_available(Backend b) {
    switch (b) {
        case Backend::scalar:
            return true;
#if DOREMI_HAVE_AVX2_TU
        case Backend::avx2:
            return avx2::supported();
#endif
#if DOREMI_HAVE_NEON_TU
        case Backend::neon:
            return neon::supported();
#endif
        default:
            return false;
    }
}

bool set_backend(Backend b) {
    if (!backend_available(b)) return false;
    Dispatch& d = dispatch_slot();
    switch (b) {
        case Backend::scalar:
            d.ops = &kScalarOps;
            break;
#if DOREMI_HAVE_AVX2_TU
        case Backend::avx2:
            d.ops = &avx2::table;
            break;
#endif
#if DOREMI_HAVE_NEON_TU
        case Backend::neon:
            d.ops = &neon::table;
            break;
#endif
        default:
            return false;
    }
    d.backend = b;
    return true;
}

namespace {
// Runs once, before first ops() use.
const bool kInitialized = set_backend(pick_default());
}  // namespace

const Ops& ops() {
    (void)kInitialized;
    return *dispatch_slot().ops;
}

Backend active_backend() { return dispatch_slot().backend; }

const Ops& scalar_ops() { return kScalarOps; }

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::scalar:
            return "scalar";
        case Backend::avx2:
            return "avx2";
        case Backend::neon:
            return "neon";
    }
    return "unknown";
}

}  // namespace doremi::kernels
