#include <atomic>
#include <cstdlib>
#include <string>
#include <vector>

#include "crossfi/kernels.hpp"

namespace crossfi::kernels {
namespace {

const KernelTable* resolve() {
  const char* env = std::getenv("CROSSFI_KERNELS");
  const std::string want = env ? env : "";
  if (want == "scalar") return &scalar_table();
  if (avx2_table() != nullptr && cpu_has_avx2()) return avx2_table();
  return &scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> table{resolve()};
  return table;
}

}  // namespace

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void force(Isa isa) {
  if (isa == Isa::avx2 && avx2_table() != nullptr && cpu_has_avx2()) {
    slot().store(avx2_table());
  } else {
    slot().store(&scalar_table());
  }
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c) {
  active().gemm_nn(m, n, k, a, k, b, n, c, n);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c) {
  const auto& t = active();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += t.dot(a + i * k, b + j * k, k);
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c) {
  // A is [k x m]; transpose once so the row-major tile kernel applies.
  std::vector<double> at(m * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) at[i * k + p] = a[p * m + i];
  }
  active().gemm_nn(m, n, k, at.data(), k, b, n, c, n);
}

}  // namespace crossfi::kernels
