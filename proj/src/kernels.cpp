#include "bevtrack/kernels.hpp"

#include <atomic>
#include <cstring>

namespace bevtrack::kernels {

namespace {
std::atomic<Mode> g_mode{Mode::Parallel};
}

Mode mode() { return g_mode.load(std::memory_order_relaxed); }
void set_mode(Mode m) { g_mode.store(m, std::memory_order_relaxed); }

// i-k-j order: the inner j loop streams over a row of b and a row of c.
void matmul_nn_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  std::memset(c, 0, m * n * sizeof(double));
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = a[i * k + kk];
      const double* bk = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

void matmul_nn_parallel(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
  std::memset(c, 0, m * n * sizeof(double));
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = a[i * k + kk];
      const double* bk = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
      ci[j] = acc;
    }
  }
}

void matmul_nt_parallel(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
      ci[j] = acc;
    }
  }
}

void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  std::memset(c, 0, m * n * sizeof(double));
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aki = a[kk * m + i];
      const double* bk = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
}

void matmul_tn_parallel(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
  std::memset(c, 0, m * n * sizeof(double));
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aki = a[kk * m + i];
      const double* bk = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
}

void matmul_nn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
  if (mode() == Mode::Parallel) {
    matmul_nn_parallel(a, b, c, m, k, n);
  } else {
    matmul_nn_serial(a, b, c, m, k, n);
  }
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
  if (mode() == Mode::Parallel) {
    matmul_nt_parallel(a, b, c, m, k, n);
  } else {
    matmul_nt_serial(a, b, c, m, k, n);
  }
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
  if (mode() == Mode::Parallel) {
    matmul_tn_parallel(a, b, c, m, k, n);
  } else {
    matmul_tn_serial(a, b, c, m, k, n);
  }
}

}  // namespace bevtrack::kernels
