#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "crossfi/autograd.hpp"
#include "crossfi/data.hpp"
#include "crossfi/random.hpp"

namespace testing {

using crossfi::Rng;
using crossfi::Shape;
using crossfi::Tensor;
namespace ag = crossfi::ag;

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = scale * rng.normal();
  return t;
}

struct GradCheckResult {
  double worst_relative = 0.0;
  std::size_t directions = 0;
};

// Compares the autodiff directional derivative of `f` with a central
// difference along random unit directions over all `params`.
inline GradCheckResult gradcheck(const std::function<ag::Var()>& f, std::vector<ag::Var> params,
                                 std::uint64_t seed, std::size_t directions = 10, double step = 1e-3) {
  for (auto& p : params) p.zero_grad();
  ag::backward(f());
  std::vector<Tensor> grads;
  for (auto& p : params) grads.push_back(p.has_grad() ? p.grad() : Tensor::zeros_like(p.value()));

  Rng rng(seed);
  GradCheckResult out;
  for (std::size_t r = 0; r < directions; ++r) {
    std::vector<Tensor> dir;
    double norm = 0.0;
    for (auto& p : params) {
      dir.push_back(random_tensor(p.shape(), rng));
      for (double v : dir.back().vec()) norm += v * v;
    }
    norm = std::sqrt(norm);
    double analytic = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < dir[i].numel(); ++j) {
        dir[i][j] /= norm;
        analytic += grads[i][j] * dir[i][j];
      }
    }
    auto shift = [&](double h) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& v = params[i].mutable_value();
        for (std::size_t j = 0; j < v.numel(); ++j) v[j] += h * dir[i][j];
      }
    };
    double plus, minus;
    {
      ag::NoGradGuard ng;
      shift(step);
      plus = f().item();
      shift(-2 * step);
      minus = f().item();
      shift(step);
    }
    const double numeric = (plus - minus) / (2 * step);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    out.worst_relative = std::max(out.worst_relative, std::abs(analytic - numeric) / denom);
    ++out.directions;
  }
  return out;
}

// Small separable two-domain synthetic set: 4 classes, t=16, D=8.
inline crossfi::data::Dataset tiny_dataset(std::size_t per_class = 12, std::uint64_t seed = 3,
                                           std::size_t classes = 4, double tempo = 1.6) {
  namespace data = crossfi::data;
  std::vector<data::SyntheticDomainSpec> specs;
  for (int d = 0; d < 2; ++d) {
    data::SyntheticDomainSpec s;
    s.domain_id = d;
    s.static_seed = 11;
    s.class_motion_profiles = data::with_tempo(data::default_motion_profiles(classes), d == 0 ? 1.0 : tempo);
    s.noise_std = 0.02;
    s.subcarriers = 8;
    s.packets_per_sample = 16;
    s.stride = 8;
    specs.push_back(s);
  }
  return data::synthesize_dataset(specs, per_class, seed);
}

}  // namespace testing
