#include <doctest.h>

#include <cmath>

#include "crossfi/autograd.hpp"
#include "crossfi/kernels.hpp"
#include "support.hpp"

namespace k = crossfi::kernels;
using crossfi::Tensor;
using testing::random_tensor;

namespace {

bool avx2_available() { return k::avx2_table() != nullptr && k::cpu_has_avx2(); }

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0}); }

struct RestoreActive {
  k::Isa saved = k::active().isa;
  ~RestoreActive() { k::force(saved); }
};

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("avx2 dot, axpy and sqdist agree with the scalar reference") {
  if (!avx2_available()) {
    MESSAGE("AVX2 unavailable on this CPU; equivalence skipped");
    return;
  }
  const auto& s = k::scalar_table();
  const auto& v = *k::avx2_table();
  crossfi::Rng rng(1);
  for (std::size_t n : {0, 1, 3, 4, 7, 8, 15, 16, 17, 33, 64, 100, 1023}) {
    auto a = random_tensor({n}, rng), b = random_tensor({n}, rng);
    CHECK(rel(s.dot(a.data(), b.data(), n), v.dot(a.data(), b.data(), n)) < 1e-13);
    CHECK(rel(s.sqdist(a.data(), b.data(), n), v.sqdist(a.data(), b.data(), n)) < 1e-13);
    auto y1 = b, y2 = b;
    s.axpy(0.37, a.data(), y1.data(), n);
    v.axpy(0.37, a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(rel(y1[i], y2[i]) < 1e-15);
  }
}

TEST_CASE("avx2 gemm agrees with the scalar reference on ragged shapes") {
  if (!avx2_available()) return;
  const auto& s = k::scalar_table();
  const auto& v = *k::avx2_table();
  crossfi::Rng rng(2);
  for (auto [m, n, kk] : {std::tuple{1, 1, 1}, {3, 5, 7}, {4, 8, 4}, {9, 13, 17}, {16, 32, 8}, {31, 7, 65}}) {
    auto a = random_tensor({std::size_t(m), std::size_t(kk)}, rng);
    auto b = random_tensor({std::size_t(kk), std::size_t(n)}, rng);
    auto c1 = random_tensor({std::size_t(m), std::size_t(n)}, rng);
    auto c2 = c1;
    s.gemm_nn(m, n, kk, a.data(), kk, b.data(), n, c1.data(), n);
    v.gemm_nn(m, n, kk, a.data(), kk, b.data(), n, c2.data(), n);
    for (std::size_t i = 0; i < c1.numel(); ++i) CHECK(rel(c1[i], c2[i]) < 1e-13);
  }
}

TEST_CASE("gemm variants match a naive triple loop") {
  RestoreActive restore;
  crossfi::Rng rng(3);
  const std::size_t m = 5, n = 6, kk = 7;
  auto a = random_tensor({m, kk}, rng), b = random_tensor({kk, n}, rng);
  Tensor want({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < kk; ++p) want.at(i, j) += a.at(i, p) * b.at(p, j);
  Tensor bt({n, kk}), at({kk, m});
  for (std::size_t p = 0; p < kk; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt.at(j, p) = b.at(p, j);
    for (std::size_t i = 0; i < m; ++i) at.at(p, i) = a.at(i, p);
  }
  for (auto isa : {k::Isa::scalar, k::Isa::avx2}) {
    k::force(isa);
    Tensor c1({m, n}), c2({m, n}), c3({m, n});
    k::gemm_nn(m, n, kk, a.data(), b.data(), c1.data());
    k::gemm_nt(m, n, kk, a.data(), bt.data(), c2.data());
    k::gemm_tn(m, n, kk, at.data(), b.data(), c3.data());
    for (std::size_t i = 0; i < want.numel(); ++i) {
      CHECK(rel(c1[i], want[i]) < 1e-13);
      CHECK(rel(c2[i], want[i]) < 1e-13);
      CHECK(rel(c3[i], want[i]) < 1e-13);
    }
  }
}

TEST_CASE("a convolution forward pass is equivalent under both kernel tables") {
  RestoreActive restore;
  crossfi::Rng rng(4);
  auto x = random_tensor({2, 2, 9, 7}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
  auto run = [&](k::Isa isa) {
    k::force(isa);
    return crossfi::ag::conv2d(crossfi::ag::constant(x), crossfi::ag::constant(w), crossfi::ag::constant(b),
                               {1, 1})
        .value();
  };
  const Tensor s = run(k::Isa::scalar), v = run(k::Isa::avx2);
  REQUIRE(s.shape() == v.shape());
  for (std::size_t i = 0; i < s.numel(); ++i) CHECK(rel(s[i], v[i]) < 1e-13);
}

TEST_CASE("force selects the requested table") {
  RestoreActive restore;
  k::force(k::Isa::scalar);
  CHECK(k::active().isa == k::Isa::scalar);
  k::force(k::Isa::avx2);
  CHECK(k::active().isa == (avx2_available() ? k::Isa::avx2 : k::Isa::scalar));
  CHECK(k::isa_name(k::Isa::avx2) == "avx2");
}

}
