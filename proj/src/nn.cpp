#include "crossfi/nn.hpp"

#include <cmath>

namespace crossfi::nn {

Tensor fan_in_normal(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
  Tensor t(std::move(shape));
  const double sd = gain / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.vec()) v = sd * rng.normal();
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, double gain)
    : weight(ag::parameter(fan_in_normal({in, out}, in, gain, rng))),
      bias(ag::parameter(Tensor(Shape{out}))) {}

ag::Var Linear::operator()(const ag::Var& x) const { return ag::add_rowvec(ag::matmul(x, weight), bias); }

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
               std::size_t pad, bool with_bias, Rng& rng, double gain)
    : weight(ag::parameter(fan_in_normal({out, in, kernel, kernel}, in * kernel * kernel, gain, rng))),
      options{stride, pad} {
  if (with_bias) bias = ag::parameter(Tensor(Shape{out}));
}

ag::Var Conv2d::operator()(const ag::Var& x) const { return ag::conv2d(x, weight, bias, options); }

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

BatchNorm2d::BatchNorm2d(std::size_t channels)
    : gamma(ag::parameter(Tensor(Shape{channels}, 1.0))),
      beta(ag::parameter(Tensor(Shape{channels}, 0.0))) {
  buffers.running_mean = Tensor(Shape{channels}, 0.0);
  buffers.running_var = Tensor(Shape{channels}, 1.0);
}

ag::Var BatchNorm2d::operator()(const ag::Var& x, bool training) {
  return ag::batch_norm2d(x, gamma, beta, buffers, training);
}

void BatchNorm2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", gamma});
  out.push_back({prefix + ".bias", beta});
}

void BatchNorm2d::collect_buffers(const std::string& prefix, BufferList& out) {
  out.push_back({prefix + ".running_mean", &buffers.running_mean});
  out.push_back({prefix + ".running_var", &buffers.running_var});
}

void append(ParamList& dst, const ParamList& src) { dst.insert(dst.end(), src.begin(), src.end()); }

std::size_t count_parameters(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.numel();
  return n;
}

void zero_grad(const ParamList& params) {
  for (const auto& p : params) {
    auto v = p.var;
    v.zero_grad();
  }
}

}  // namespace crossfi::nn
