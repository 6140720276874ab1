#pragma once

#include <cstddef>
#include <span>
#include <string_view>

// Dense float64 inner loops used by the autograd ops. Every kernel has a
// portable scalar reference and an AVX2+FMA variant; the active table is
// picked once at startup from CPUID and can be forced with the environment
// variable CROSSFI_KERNELS=scalar|avx2.
namespace crossfi::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // C[m x n] += A[m x k] * B[k x n], all row-major with leading dimensions.
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                  std::size_t lda, const double* b, std::size_t ldb, double* c,
                  std::size_t ldc);
  // out[i] = sum_j (a[j] - b[j])^2 over n entries
  double (*sqdist)(const double* a, const double* b, std::size_t n);
};

const KernelTable& scalar_table();
// Returns nullptr when the binary was built without AVX2 support.
const KernelTable* avx2_table();

bool cpu_has_avx2();

// The table used by the library. Resolved once.
const KernelTable& active();
// Overrides the active table (tests and benchmarking).
void force(Isa isa);
std::string_view isa_name(Isa isa);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}

// C += A * B (row-major, contiguous).
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c);
// C += A * B^T where B is [n x k].
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c);
// C += A^T * B where A is [k x m].
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c);

}  // namespace crossfi::kernels
