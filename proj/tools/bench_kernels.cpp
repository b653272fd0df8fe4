// Timing comparison between the serial reference kernels and the OpenMP
// variants, with a bitwise equality check on every size.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include <omp.h>

#include "bevtrack/kernels.hpp"

using namespace bevtrack;
using Clock = std::chrono::steady_clock;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm-up
  const auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r) fn();
  const auto t1 = Clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
  std::printf("threads available: %d\n", omp_get_max_threads());
  std::printf("%8s %6s %12s %12s %9s %8s\n", "m=k=n", "reps", "serial(ms)", "openmp(ms)",
              "speedup", "bitwise");

  std::mt19937_64 rng(12345);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);

  bool all_equal = true;
  for (std::size_t n : {32u, 64u, 128u, 256u, 384u, 512u}) {
    std::vector<double> a(n * n), b(n * n), cs(n * n), cp(n * n);
    for (auto& v : a) v = dist(rng);
    for (auto& v : b) v = dist(rng);
    const int reps = n <= 128 ? 20 : 5;

    const double ts = time_ms([&] { kernels::matmul_nn_serial(a.data(), b.data(), cs.data(), n, n, n); }, reps);
    const double tp = time_ms([&] { kernels::matmul_nn_parallel(a.data(), b.data(), cp.data(), n, n, n); }, reps);
    const bool equal = std::memcmp(cs.data(), cp.data(), n * n * sizeof(double)) == 0;
    all_equal = all_equal && equal;
    std::printf("%8zu %6d %12.3f %12.3f %8.2fx %8s\n", n, reps, ts, tp, ts / tp,
                equal ? "yes" : "NO");
  }
  if (!all_equal) {
    std::fprintf(stderr, "serial and OpenMP kernels disagree\n");
    return 1;
  }
  return 0;
}
