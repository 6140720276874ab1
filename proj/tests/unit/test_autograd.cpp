#include <doctest.h>

#include "crossfi/autograd.hpp"
#include "crossfi/encoder.hpp"
#include "crossfi/error.hpp"
#include "support.hpp"

using namespace crossfi;
using testing::gradcheck;
using testing::random_tensor;

TEST_SUITE("autograd") {

TEST_CASE("elementwise and linear ops pass the central-difference check") {
  Rng rng(10);
  auto a = ag::parameter(random_tensor({3, 4}, rng));
  auto b = ag::parameter(random_tensor({4, 5}, rng));
  auto c = ag::parameter(random_tensor({5}, rng));
  auto f = [&] {
    auto h = ag::add_rowvec(ag::matmul(a, b), c);
    h = ag::mul(ag::sigmoid(h), ag::exp(ag::scale(h, 0.3)));
    return ag::sum(ag::add_scalar(ag::sub(h, ag::scale(h, 0.5)), 1.0));
  };
  CHECK(gradcheck(f, {a, b, c}, 1).worst_relative < 1e-3);
}

TEST_CASE("matmul_nt, pairwise distances and cosine pass the gradient check") {
  Rng rng(11);
  auto q = ag::parameter(random_tensor({3, 6}, rng));
  auto k = ag::parameter(random_tensor({4, 6}, rng));
  auto f = [&] {
    return ag::sum(ag::add(ag::add(ag::matmul_nt(q, k), ag::scale(ag::pairwise_sqdist(q, k), 0.1)),
                           ag::pairwise_cosine(q, k)));
  };
  CHECK(gradcheck(f, {q, k}, 2).worst_relative < 1e-3);
}

TEST_CASE("conv2d, pooling and reshape ops pass the gradient check") {
  Rng rng(12);
  auto x = ag::parameter(random_tensor({2, 2, 6, 5}, rng));
  auto w = ag::parameter(random_tensor({3, 2, 3, 3}, rng, 0.5));
  auto b = ag::parameter(random_tensor({3}, rng));
  auto f = [&] {
    auto h = ag::conv2d(x, w, b, {2, 1});
    auto p = ag::global_avg_pool(ag::sigmoid(h));
    auto m = ag::mean_last_axis(ag::max_pool2d(h, 2, 1, 0));
    return ag::add(ag::sum(ag::mul(p, p)), ag::mean(ag::reshape(m, {m.numel()})));
  };
  CHECK(gradcheck(f, {x, w, b}, 3).worst_relative < 1e-3);
}

TEST_CASE("batch norm in training mode passes the gradient check") {
  Rng rng(13);
  auto x = ag::parameter(random_tensor({3, 2, 4, 3}, rng));
  auto g = ag::parameter(random_tensor({2}, rng));
  auto be = ag::parameter(random_tensor({2}, rng));
  ag::BatchNormBuffers buf{Tensor({2}, 0.0), Tensor({2}, 1.0)};
  auto f = [&] {
    auto y = ag::batch_norm2d(x, g, be, buf, true);
    return ag::sum(ag::mul(ag::sigmoid(y), y));
  };
  CHECK(gradcheck(f, {x, g, be}, 4).worst_relative < 1e-3);
}

TEST_CASE("shape ops and weighted class mean pass the gradient check") {
  Rng rng(14);
  auto a = ag::parameter(random_tensor({3, 3}, rng));
  auto w = ag::parameter(random_tensor({5}, rng));
  const Tensor rows = random_tensor({5, 4}, rng);
  const std::vector<int> labels{0, 1, 0, 2, 1};
  auto f = [&] {
    auto p = ag::pad_to(a, 5, 5);
    std::vector<std::size_t> pick{4, 0, 2};
    auto s = ag::select_rows(p, pick);
    std::vector<ag::Var> parts{s, p};
    auto cat = ag::concat_rows(parts);
    auto t = ag::take_prefix(ag::reshape(cat, {cat.numel()}), 7);
    auto m = ag::weighted_class_mean(ag::sigmoid(w), rows, labels, 3);
    return ag::add(ag::sum(ag::mul(t, t)), ag::sum(ag::mul(m, m)));
  };
  CHECK(gradcheck(f, {a, w}, 5).worst_relative < 1e-3);
}

TEST_CASE("softmax cross-entropy passes the gradient check") {
  Rng rng(15);
  auto z = ag::parameter(random_tensor({4, 3}, rng));
  const std::vector<int> y{0, 2, 1, 2};
  CHECK(gradcheck([&] { return ag::softmax_cross_entropy(z, y); }, {z}, 6).worst_relative < 1e-3);
}

TEST_CASE("tiny encoder readout matches finite differences on parameters and input") {
  Rng rng(16);
  EncoderConfig cfg;
  cfg.d1 = 8;
  Encoder enc(cfg, 8, 6, rng);
  auto x = ag::parameter(random_tensor({2, 2, 8, 6}, rng));
  std::vector<ag::Var> params{x};
  for (auto& p : enc.parameters()) params.push_back(p.var);
  auto f = [&] {
    auto e = enc.forward(x);
    return ag::sum(ag::mul(e, e));
  };
  CHECK(gradcheck(f, params, 7, 10, 1e-6).worst_relative < 1e-3);
}

TEST_CASE("no-grad mode records no graph and detach blocks gradients") {
  auto p = ag::parameter(Tensor({2}, std::vector<double>{1.0, 2.0}));
  {
    ag::NoGradGuard guard;
    CHECK_FALSE(ag::grad_enabled());
    CHECK_FALSE(ag::scale(p, 2.0).requires_grad());
  }
  CHECK(ag::grad_enabled());
  p.zero_grad();
  ag::backward(ag::sum(ag::add(ag::detach(ag::scale(p, 5.0)), ag::scale(p, 2.0))));
  CHECK(p.grad()[0] == doctest::Approx(2.0));
  CHECK(p.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("encoder output shape and duplicate rows") {
  Rng rng(17);
  EncoderConfig cfg;
  Encoder enc(cfg, 16, 8, rng);
  auto x = random_tensor({4, 2, 16, 8}, rng);
  for (std::size_t i = 0; i < 2 * 16 * 8; ++i) x[3 * 256 + i] = x[i];
  auto e = enc.forward(x);
  REQUIRE(e.shape() == Shape{4, 64});
  for (std::size_t j = 0; j < 64; ++j) CHECK(e.value().at(0, j) == e.value().at(3, j));
  CHECK_THROWS_AS(enc.forward(random_tensor({1, 2, 15, 8}, rng)), DimensionError);
}

}
