#include <doctest.h>

#include <cmath>

#include "crossfi/error.hpp"
#include "crossfi/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace crossfi;
using testing::gradcheck;
using testing::random_tensor;

namespace {

Tensor to_tensor(const oracle::Matrix& m) {
  Tensor t({m.size(), m[0].size()});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[0].size(); ++j) t.at(i, j) = m[i][j];
  return t;
}

oracle::Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  oracle::Matrix m(r, std::vector<double>(c));
  for (auto& row : m)
    for (auto& v : row) v = scale * rng.normal();
  return m;
}

double loss(const oracle::Matrix& s, std::vector<int> lq, std::vector<int> lk, std::optional<double> a) {
  return comparative_loss(ag::constant(to_tensor(s)), lq, lk, a).item();
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("comparative loss examples") {
  CHECK(loss({{1.0}}, {0}, {0}, 1.0) == 0.0);
  CHECK(loss({{0.0}}, {0}, {1}, 1.0) == 0.0);
  CHECK(loss({{0.5, 0.5}, {0.5, 0.5}}, {0, 1}, {0, 1}, 1.0) == 1.0);
  CHECK_THROWS_AS(loss({{0.5, 0.5}}, {0, 1}, {0, 1}, 1.0), DimensionError);
}

TEST_CASE("template loss examples") {
  auto tl = [](const oracle::Matrix& s, std::vector<int> l, std::optional<double> a) {
    return template_loss(ag::constant(to_tensor(s)), l, a).item();
  };
  CHECK(tl({{1, 0}}, {0}, 1.0) == 0.0);
  CHECK(tl({{0, 1}}, {0}, 1.0) == 2.0);
  CHECK(tl({{0.5, 0.5}}, {0}, 2.0) == 0.75);
  CHECK_THROWS(tl({{0.5, 0.5}}, {2}, 1.0));
}

TEST_CASE("losses equal exhaustive pair sums on every 2x2 and 3x3 label configuration") {
  Rng rng(7);
  std::size_t configs = 0;
  for (std::size_t n : {2, 3}) {
    std::size_t combos = 1;
    for (std::size_t i = 0; i < n; ++i) combos *= n;
    auto decode = [&](std::size_t code) {
      std::vector<int> l(n);
      for (std::size_t i = 0; i < n; ++i, code /= n) l[i] = static_cast<int>(code % n);
      return l;
    };
    for (std::size_t a = 0; a < combos; ++a) {
      for (std::size_t b = 0; b < combos; ++b) {
        oracle::Matrix s(n, std::vector<double>(n));
        for (auto& row : s)
          for (auto& v : row) v = rng.uniform();
        for (std::optional<double> alpha : {std::optional<double>{}, std::optional<double>{1.0},
                                            std::optional<double>{2.5}}) {
          CHECK(loss(s, decode(a), decode(b), alpha) == oracle::comparative(s, decode(a), decode(b), alpha));
        }
        ++configs;
      }
      oracle::Matrix st(n, std::vector<double>(n));
      for (auto& row : st)
        for (auto& v : row) v = rng.uniform();
      CHECK(template_loss(ag::constant(to_tensor(st)), decode(a), std::nullopt).item() ==
            oracle::template_loss(st, decode(a), std::nullopt));
    }
  }
  CHECK(configs == 16 + 729);
}

TEST_CASE("contrastive losses are permutation invariant and zero at their targets") {
  oracle::Matrix s = {{0.9, 0.2, 0.4}, {0.1, 0.7, 0.3}};
  std::vector<int> lq{0, 1}, lk{1, 0, 1};
  const double base = loss(s, lq, lk, std::nullopt);
  CHECK(base > 0);
  oracle::Matrix sp = {{0.1, 0.7, 0.3}, {0.9, 0.2, 0.4}};
  CHECK(loss(sp, {1, 0}, lk, std::nullopt) == doctest::Approx(base));
  oracle::Matrix sc = {{0.4, 0.2, 0.9}, {0.3, 0.7, 0.1}};
  CHECK(loss(sc, lq, {1, 0, 1}, std::nullopt) == doctest::Approx(base));
  CHECK(loss({{0, 1, 0}, {1, 0, 1}}, lq, lk, std::nullopt) == 0.0);
}

TEST_CASE("auto alpha balances negatives against positives within [1, 100]") {
  CHECK(auto_alpha(2, 6) == 3.0);
  CHECK(auto_alpha(6, 2) == 1.0);
  CHECK(auto_alpha(1, 1000) == 100.0);
  CHECK(auto_alpha(0, 5) == 100.0);
}

TEST_CASE("mk-mmd closed form and kernel mixture") {
  LossConfig one;
  one.kernel_count = 1;
  one.bandwidths = {1.0};
  auto a = ag::constant(Tensor({1, 1}, std::vector<double>{0.0}));
  auto b = ag::constant(Tensor({1, 1}, std::vector<double>{1.0}));
  const double v1 = mk_mmd(a, b, one).item();
  CHECK(v1 == doctest::Approx(2.0 - 2.0 * std::exp(-0.5)).epsilon(1e-14));
  CHECK(v1 == doctest::Approx(0.78694).epsilon(1e-5));

  LossConfig two;
  two.kernel_count = 2;
  two.bandwidths = {1.0, 2.0};
  two.beta = {0.5, 0.5};
  LossConfig second = one;
  second.bandwidths = {2.0};
  CHECK(mk_mmd(a, b, two).item() == doctest::Approx(0.5 * (v1 + mk_mmd(a, b, second).item())));
}

TEST_CASE("mk-mmd matches brute-force double sums, vanishes on identical sets and is non-negative") {
  Rng rng(8);
  LossConfig cfg;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.index(10), m = 1 + rng.index(10), d = 1 + rng.index(6);
    auto x = random_matrix(n, d, rng), y = random_matrix(m, d, rng, 1.5);
    auto xv = ag::constant(to_tensor(x)), yv = ag::constant(to_tensor(y));
    const auto sig = mmd_bandwidths(xv.value(), yv.value(), cfg);
    CHECK(std::abs(mk_mmd(xv, yv, cfg).item() - oracle::mk_mmd(x, y, sig, cfg.resolved_beta())) <= 1e-10);
    CHECK(std::abs(mk_mmd(xv, xv, cfg).item()) <= 1e-7);
    CHECK(mk_mmd(xv, yv, cfg).item() == doctest::Approx(mk_mmd(yv, xv, cfg).item()).epsilon(1e-12));
  }
  for (int trial = 0; trial < 1000; ++trial) {
    auto x = random_matrix(1 + rng.index(6), 3, rng), y = random_matrix(1 + rng.index(6), 3, rng);
    CHECK(mk_mmd(ag::constant(to_tensor(x)), ag::constant(to_tensor(y)), cfg).item() >= -1e-15);
  }
}

TEST_CASE("mk-mmd floors a degenerate bandwidth and rejects empty sets") {
  LossConfig cfg;
  auto z = ag::constant(Tensor({3, 2}));
  CHECK(mk_mmd(z, z, cfg).item() == 0.0);
  for (double s : mmd_bandwidths(z.value(), z.value(), cfg)) CHECK(s >= kBandwidthFloor);
  CHECK_THROWS_AS(mk_mmd(ag::constant(Tensor({0, 2})), z, cfg), PreconditionError);
}

TEST_CASE("loss config validates the kernel mixture") {
  LossConfig cfg;
  cfg.beta = {0.5, 0.6, 0, 0, 0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.beta = {1.0, 0, 0, 0, -0.0001};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  LossConfig back = LossConfig::from_json(LossConfig{}.to_json());
  CHECK_FALSE(back.alpha.has_value());
  CHECK(back.kernel_count == 5);
}

TEST_CASE("losses pass the gradient check") {
  Rng rng(9);
  auto s = ag::parameter(random_tensor({3, 4}, rng));
  std::vector<int> lq{0, 1, 1}, lk{1, 0, 2, 1};
  CHECK(gradcheck([&] { return comparative_loss(ag::sigmoid(s), lq, lk, std::nullopt); }, {s}, 1).worst_relative <
        1e-3);
  CHECK(gradcheck([&] { return template_loss(ag::sigmoid(s), lq, 2.0); }, {s}, 2).worst_relative < 1e-3);
  auto x = ag::parameter(random_tensor({4, 3}, rng));
  auto y = ag::parameter(random_tensor({5, 3}, rng, 2.0));
  LossConfig cfg;
  cfg.bandwidths = {0.5, 1.0, 2.0, 4.0, 8.0};
  CHECK(gradcheck([&] { return mk_mmd(x, y, cfg); }, {x, y}, 3).worst_relative < 1e-3);
}

}
