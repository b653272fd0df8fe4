#pragma once

#include <cstddef>

// Dense matrix kernels. Each kernel has a serial reference version and an
// OpenMP version parallelized over output rows. Every output element is
// accumulated by exactly one thread in the same k-order as the serial code,
// so the two variants are bitwise identical and results do not depend on
// the thread count.
namespace bevtrack::kernels {

enum class Mode { Serial, Parallel };

Mode mode();
void set_mode(Mode m);

// c[m x n] = a[m x k] * b[k x n], all row-major. c must not alias a or b.
void matmul_nn_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_nn_parallel(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n);

// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_nt_parallel(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n);

// c[m x n] = a[k x m]^T * b[k x n]
void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_tn_parallel(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n);

// Dispatch on the global mode.
void matmul_nn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);

}  // namespace bevtrack::kernels
