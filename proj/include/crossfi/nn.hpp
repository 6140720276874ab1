#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "crossfi/autograd.hpp"
#include "crossfi/random.hpp"

namespace crossfi::nn {

struct NamedParam {
  std::string name;
  ag::Var var;
};
using ParamList = std::vector<NamedParam>;

struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};
using BufferList = std::vector<NamedBuffer>;

// Fan-in scaled normal init: std = gain / sqrt(fan_in).
Tensor fan_in_normal(Shape shape, std::size_t fan_in, double gain, Rng& rng);

struct Linear {
  ag::Var weight;  // [in, out]
  ag::Var bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
  ag::Var operator()(const ag::Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Conv2d {
  ag::Var weight;  // [out, in, k, k]
  ag::Var bias;    // [out] or undefined
  ag::Conv2dOptions options;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
         std::size_t pad, bool with_bias, Rng& rng, double gain = std::sqrt(2.0));
  ag::Var operator()(const ag::Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct BatchNorm2d {
  ag::Var gamma;
  ag::Var beta;
  ag::BatchNormBuffers buffers;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);
  ag::Var operator()(const ag::Var& x, bool training);
  void collect(const std::string& prefix, ParamList& out) const;
  void collect_buffers(const std::string& prefix, BufferList& out);
};

// Adds every entry of `src` to `dst` preserving names.
void append(ParamList& dst, const ParamList& src);
std::size_t count_parameters(const ParamList& params);
void zero_grad(const ParamList& params);

}  // namespace crossfi::nn
