#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "crossfi/tensor.hpp"

// Minimal reverse-mode automatic differentiation over float64 tensors.
//
// A Var is a shared handle to a graph node. Ops record their inputs and a
// backward closure when at least one input requires a gradient and grad mode
// is enabled. Leaves created with `parameter` persist across steps and
// accumulate gradients until `zero_grad`, which releases the buffer so
// has_grad() reports only parameters reached by the latest backward.
namespace crossfi::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Allocates the gradient buffer on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad() { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t numel() const { return node_->value.numel(); }
  double item() const { return node_->value[0]; }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }
  void zero_grad();

 private:
  std::shared_ptr<Node> node_;
};

Var parameter(Tensor value);
Var constant(Tensor value);

// Runs reverse accumulation from a scalar (numel 1) output.
void backward(const Var& root);

bool grad_enabled();

// Disables graph recording for its lifetime (evaluation, template
// generation without gradient).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- elementwise -------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var detach(const Var& a);

// ---- reductions / shape ------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);
Var concat_rows(std::span<const Var> parts);
Var select_rows(const Var& a, std::span<const std::size_t> rows);
// Places a [r x c] matrix in the top-left corner of a zero [rows x cols] one.
Var pad_to(const Var& a, std::size_t rows, std::size_t cols);
// First `count` entries of a flat tensor, returned as shape [count].
Var take_prefix(const Var& a, std::size_t count);
// [N, C, H, W] -> [N, C, H] averaging the last axis.
Var mean_last_axis(const Var& a);
// [N, C, H, W] -> [N, C]
Var global_avg_pool(const Var& a);

// ---- linear algebra ----------------------------------------------------
// [m x k] * [k x n]
Var matmul(const Var& a, const Var& b);
// [m x k] * [n x k]^T
Var matmul_nt(const Var& a, const Var& b);
// x[m x n] + bias[n] broadcast over rows
Var add_rowvec(const Var& x, const Var& bias);

// ---- convolution -------------------------------------------------------
struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};
// x [N, C, H, W], w [O, C, KH, KW], bias [O] (may be undefined).
Var conv2d(const Var& x, const Var& w, const Var& bias, Conv2dOptions opt);
Var max_pool2d(const Var& x, std::size_t kernel, std::size_t stride, std::size_t pad);

struct BatchNormBuffers {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};
// Uses batch statistics and updates running buffers when `training`,
// running statistics otherwise.
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta,
                 BatchNormBuffers& buffers, bool training);

// ---- similarity primitives ---------------------------------------------
// out[i][j] = ||q_i - k_j||^2
Var pairwise_sqdist(const Var& q, const Var& k);
// out[i][j] = cos(q_i, k_j); a zero-norm row yields 0 against everything.
Var pairwise_cosine(const Var& q, const Var& k);

// ---- losses ------------------------------------------------------------
// sum_ij alpha * pos_ij * (1 - S_ij)^2 + (1 - pos_ij) * S_ij^2
Var contrastive_sum(const Var& s, const Tensor& positive_mask, double alpha);
// Mean softmax cross-entropy over rows.
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);

// ---- templates ---------------------------------------------------------
// out[c] = sum_{i: label_i = c} w_i x_i / sum_{i: label_i = c} w_i, rows of
// classes with no member are zero. Differentiable in w only.
Var weighted_class_mean(const Var& weights, const Tensor& rows,
                        std::span<const int> labels, std::size_t num_classes);

}  // namespace crossfi::ag
