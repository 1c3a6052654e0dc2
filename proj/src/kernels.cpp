#include "dtem/kernels.hpp"

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dtem::kernels {

namespace {
std::atomic<bool> g_parallel{true};

inline void matmul_row(const double* a, const double* b, double* c,
                       std::size_t i, std::size_t k, std::size_t n) {
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
}
}  // namespace

void set_parallel(bool enabled) { g_parallel.store(enabled); }
bool parallel_enabled() { return g_parallel.load(); }

void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) matmul_row(a, b, c, i, k, n);
}

void matmul_omp(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n) {
#ifdef _OPENMP
    // Each thread owns whole output rows; the per-row accumulation order
    // matches the serial kernel exactly.
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i)
        matmul_row(a, b, c, static_cast<std::size_t>(i), k, n);
#else
    matmul_serial(a, b, c, m, k, n);
#endif
}

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
    if (parallel_enabled())
        matmul_omp(a, b, c, m, k, n);
    else
        matmul_serial(a, b, c, m, k, n);
}

}  // namespace dtem::kernels
