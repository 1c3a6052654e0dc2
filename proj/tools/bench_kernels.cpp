#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "dtem/kernels.hpp"

// Serial vs OpenMP matrix-multiply comparison. Both paths share the same
// per-row inner loop, so results are bitwise identical; this reports wall
// time and verifies that equality at each size.

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
    std::mt19937_64 rng(42);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::printf("%8s %12s %12s %10s %8s\n", "size", "serial ms", "omp ms", "speedup", "equal");
    for (std::size_t n : {64, 128, 256, 512}) {
        std::vector<double> a(n * n), b(n * n), cs(n * n), cp(n * n);
        for (double& v : a) v = dist(rng);
        for (double& v : b) v = dist(rng);
        int reps = n <= 128 ? 20 : 5;
        double ts = time_ms(
            [&] { dtem::kernels::matmul_serial(a.data(), b.data(), cs.data(), n, n, n); }, reps);
        double tp = time_ms(
            [&] { dtem::kernels::matmul_omp(a.data(), b.data(), cp.data(), n, n, n); }, reps);
        bool equal = cs == cp;
        std::printf("%8zu %12.3f %12.3f %9.2fx %8s\n", n, ts, tp, ts / tp, equal ? "yes" : "NO");
        if (!equal) return 1;
    }
    return 0;
}
