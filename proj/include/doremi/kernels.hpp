#pragma once

// Dense fp64 inner loops behind a runtime-dispatched table. Every SIMD
// variant must produce bit-identical output to the scalar reference: kernels
// vectorize across independent output elements only, never across a
// reduction axis, and use separate mul/add (no FMA) so rounding matches the
// scalar code compiled with -ffp-contract=off.

#include <cstddef>

namespace doremi::kernels {

enum class Backend { scalar, avx2, neon };

const char* backend_name(Backend b);

struct Ops {
    // C[n x k] += A[n x m] * B[m x k], all row-major contiguous.
    // Accumulation order per output element: m = 0..m-1.
    void (*gemm_acc)(double* c, const double* a, const double* b, int n, int m, int k);
    // dst[i] = a[i] + b[i]
    void (*add)(double* dst, const double* a, const double* b, std::size_t n);
    // dst[i] = a[i] - b[i]
    void (*sub)(double* dst, const double* a, const double* b, std::size_t n);
    // dst[i] = a[i] * b[i]
    void (*mul)(double* dst, const double* a, const double* b, std::size_t n);
    // dst[i] += a[i] * b[i]
    void (*mul_acc)(double* dst, const double* a, const double* b, std::size_t n);
    // y[i] += alpha * x[i]
    void (*axpy)(double* y, double alpha, const double* x, std::size_t n);
    // y[i] *= alpha
    void (*scale)(double* y, double alpha, std::size_t n);
    // x[i*d + j] += row[j] for every row i
    void (*add_row_broadcast)(double* x, const double* row, int n, int d);
};

// Active table; selected once at startup from CPU features, overridable with
// DOREMI_KERNELS=scalar|avx2|neon.
const Ops& ops();
Backend active_backend();

// Always-available reference implementations.
const Ops& scalar_ops();

// Returns false if the backend is unavailable on this machine.
bool set_backend(Backend b);
bool backend_available(Backend b);

}  // namespace doremi::kernels
