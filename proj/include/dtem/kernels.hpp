#pragma once

#include <cstddef>

namespace dtem::kernels {

// Runtime switch between the serial reference kernels and the OpenMP
// parallel ones. Both compute every output element with the identical
// serial inner loop, so results are bitwise equal regardless of the
// thread count.
void set_parallel(bool enabled);
bool parallel_enabled();

// C[m x n] = A[m x k] * B[k x n]
void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n);
void matmul_omp(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n);
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);

}  // namespace dtem::kernels
