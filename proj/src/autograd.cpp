#include "crossfi/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

#include "crossfi/error.hpp"
#include "crossfi/kernels.hpp"

namespace crossfi::ag {
namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Var make_result(Tensor value, std::vector<NodePtr> parents,
                std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || (p && p->requires_grad);
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

bool wants(const NodePtr& p) { return p && p->requires_grad; }

template <typename F>
Var unary(const Var& a, F&& forward, std::function<void(Node&)> bw) {
  Tensor out = Tensor::zeros_like(a.value());
  const auto& in = a.value();
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = forward(in[i]);
  return make_result(std::move(out), {a.node()}, std::move(bw));
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor::zeros_like(value);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Var parameter(Tensor value) { return Var(std::move(value), true); }
Var constant(Tensor value) { return Var(std::move(value), false); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  require(root.numel() == 1, "backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent && parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---- elementwise -------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  kernels::axpy(1.0, b.value().span(), out.span());
  return make_result(std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (auto& p : self.parents) {
      if (wants(p)) kernels::axpy(1.0, self.grad.span(), p->grad_buffer().span());
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  kernels::axpy(-1.0, b.value().span(), out.span());
  return make_result(std::move(out), {a.node(), b.node()}, [](Node& self) {
    if (wants(self.parents[0]))
      kernels::axpy(1.0, self.grad.span(), self.parents[0]->grad_buffer().span());
    if (wants(self.parents[1]))
      kernels::axpy(-1.0, self.grad.span(), self.parents[1]->grad_buffer().span());
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a.node(), b.node()}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (wants(pb)) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](Node& self) {
    kernels::axpy(c, self.grad.span(), self.parents[0]->grad_buffer().span());
  });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](Node& self) {
    kernels::axpy(1.0, self.grad.span(), self.parents[0]->grad_buffer().span());
  });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](Node& self) {
    auto& p = self.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (p->value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

namespace {
double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(const Var& a) {
  return unary(a, stable_sigmoid, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double s = self.value[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Var detach(const Var& a) { return constant(a.value()); }

// ---- reductions / shape ------------------------------------------------

Var sum(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().vec()) acc += v;
  return make_result(Tensor::scalar(acc), {a.node()}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0];
    for (auto& v : g.vec()) v += up;
  });
}

Var mean(const Var& a) {
  require(a.numel() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a.node()}, [](Node& self) {
    kernels::axpy(1.0, self.grad.span(), self.parents[0]->grad_buffer().span());
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    require(Shape(shape.begin() + 1, shape.end()) == tail, "concat_rows: trailing shape mismatch");
    rows += p.dim(0);
    parents.push_back(p.node());
  }
  shape[0] = rows;
  Tensor out(shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().vec().begin(), p.value().vec().end(), out.data() + offset);
    offset += p.numel();
  }
  return make_result(std::move(out), std::move(parents), [](Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.numel();
      if (wants(p)) {
        kernels::axpy(1.0, std::span<const double>(self.grad.data() + off, n),
                      p->grad_buffer().span());
      }
      off += n;
    }
  });
}

Var select_rows(const Var& a, std::span<const std::size_t> rows) {
  const std::size_t width = a.value().row_size();
  Shape shape = a.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < a.dim(0), "select_rows: index out of range");
    auto src = a.value().row(rows[i]);
    std::copy(src.begin(), src.end(), out.data() + i * width);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(std::move(out), {a.node()}, [idx, width](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      kernels::active().axpy(1.0, self.grad.data() + i * width, g.data() + idx[i] * width,
                             width);
    }
  });
}

Var pad_to(const Var& a, std::size_t rows, std::size_t cols) {
  require(a.value().rank() == 2, "pad_to: expects a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1);
  require(r <= rows && c <= cols, "pad_to: target smaller than input");
  Tensor out(Shape{rows, cols});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = a.value().at(i, j);
  }
  return make_result(std::move(out), {a.node()}, [r, c, cols](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) g.at(i, j) += self.grad[i * cols + j];
    }
  });
}

Var take_prefix(const Var& a, std::size_t count) {
  require(count <= a.numel(), "take_prefix: count exceeds size");
  Tensor out(Shape{count});
  std::copy_n(a.value().data(), count, out.data());
  return make_result(std::move(out), {a.node()}, [count](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < count; ++i) g[i] += self.grad[i];
  });
}

Var mean_last_axis(const Var& a) {
  require(a.value().rank() == 4, "mean_last_axis: expects [N, C, H, W]");
  const std::size_t outer = a.dim(0) * a.dim(1) * a.dim(2), w = a.dim(3);
  Tensor out(Shape{a.dim(0), a.dim(1), a.dim(2)});
  for (std::size_t i = 0; i < outer; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < w; ++j) acc += a.value()[i * w + j];
    out[i] = acc / static_cast<double>(w);
  }
  return make_result(std::move(out), {a.node()}, [outer, w](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < outer; ++i) {
      const double up = self.grad[i] / static_cast<double>(w);
      for (std::size_t j = 0; j < w; ++j) g[i * w + j] += up;
    }
  });
}

Var global_avg_pool(const Var& a) {
  require(a.value().rank() == 4, "global_avg_pool: expects [N, C, H, W]");
  const std::size_t nc = a.dim(0) * a.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor out(Shape{a.dim(0), a.dim(1)});
  for (std::size_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += a.value()[i * hw + j];
    out[i] = acc / static_cast<double>(hw);
  }
  return make_result(std::move(out), {a.node()}, [nc, hw](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < nc; ++i) {
      const double up = self.grad[i] / static_cast<double>(hw);
      for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += up;
    }
  });
}

// ---- linear algebra ----------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  kernels::gemm_nn(m, n, k, a.value().data(), b.value().data(), out.data());
  return make_result(std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    // dA = dC * B^T, dB = A^T * dC
    if (wants(pa)) kernels::gemm_nt(m, k, n, self.grad.data(), pb->value.data(), pa->grad_buffer().data());
    if (wants(pb)) kernels::gemm_tn(k, n, m, pa->value.data(), self.grad.data(), pb->grad_buffer().data());
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(1),
          "matmul_nt: incompatible shapes " + shape_str(a.shape()) + " * " +
              shape_str(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out(Shape{m, n});
  kernels::gemm_nt(m, n, k, a.value().data(), b.value().data(), out.data());
  return make_result(std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    // dA = dC * B, dB = dC^T * A
    if (wants(pa)) kernels::gemm_nn(m, k, n, self.grad.data(), pb->value.data(), pa->grad_buffer().data());
    if (wants(pb)) kernels::gemm_tn(n, k, m, self.grad.data(), pa->value.data(), pb->grad_buffer().data());
  });
}

Var add_rowvec(const Var& x, const Var& bias) {
  require(x.value().rank() == 2 && bias.numel() == x.dim(1),
          "add_rowvec: bias length must equal column count");
  Tensor out = x.value();
  const std::size_t m = x.dim(0), n = x.dim(1);
  for (std::size_t i = 0; i < m; ++i) {
    kernels::active().axpy(1.0, bias.value().data(), out.data() + i * n, n);
  }
  return make_result(std::move(out), {x.node(), bias.node()}, [m, n](Node& self) {
    if (wants(self.parents[0]))
      kernels::axpy(1.0, self.grad.span(), self.parents[0]->grad_buffer().span());
    if (wants(self.parents[1])) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        kernels::active().axpy(1.0, self.grad.data() + i * n, g.data(), n);
      }
    }
  });
}

// ---- convolution -------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
  std::size_t col_rows() const { return c * kh * kw; }
  std::size_t col_cols() const { return ho * wo; }
};

void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* dst = col + ((ci * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            dst[oy * g.wo + ox] = inside ? x[(ci * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* x) {
  const std::size_t cols = g.col_cols();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* src = col + ((ci * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            x[(ci * g.h + iy) * g.w + ix] += src[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, Conv2dOptions opt) {
  require(x.value().rank() == 4 && w.value().rank() == 4,
          "conv2d: expects x [N,C,H,W] and w [O,C,KH,KW]");
  require(x.dim(1) == w.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) +
                                    " channels, kernel expects " + std::to_string(w.dim(1)));
  require(opt.stride >= 1, "conv2d: stride must be >= 1");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                 opt.stride, opt.pad, 0, 0};
  require(g.h + 2 * g.pad >= g.kh && g.w + 2 * g.pad >= g.kw, "conv2d: kernel larger than input");
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == g.o, "conv2d: bias length must equal out channels");

  Tensor out(Shape{g.n, g.o, g.ho, g.wo});
  std::vector<double> col(g.col_rows() * g.col_cols());
  const std::size_t in_stride = g.c * g.h * g.w, out_stride = g.o * g.ho * g.wo;
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(g, x.value().data() + s * in_stride, col.data());
    double* dst = out.data() + s * out_stride;
    if (has_bias) {
      for (std::size_t oc = 0; oc < g.o; ++oc) {
        std::fill_n(dst + oc * g.col_cols(), g.col_cols(), bias.value()[oc]);
      }
    }
    kernels::gemm_nn(g.o, g.col_cols(), g.col_rows(), w.value().data(), col.data(), dst);
  }

  std::vector<NodePtr> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(bias.node());
  return make_result(std::move(out), std::move(parents), [g, in_stride, out_stride](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    const bool bias_grad = self.parents.size() > 2 && wants(self.parents[2]);
    std::vector<double> col(g.col_rows() * g.col_cols());
    std::vector<double> dcol(wants(px) ? col.size() : 0);
    for (std::size_t s = 0; s < g.n; ++s) {
      const double* dout = self.grad.data() + s * out_stride;
      if (wants(pw)) {
        im2col(g, px->value.data() + s * in_stride, col.data());
        kernels::gemm_nt(g.o, g.col_rows(), g.col_cols(), dout, col.data(),
                         pw->grad_buffer().data());
      }
      if (wants(px)) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        kernels::gemm_tn(g.col_rows(), g.col_cols(), g.o, pw->value.data(), dout, dcol.data());
        col2im(g, dcol.data(), px->grad_buffer().data() + s * in_stride);
      }
      if (bias_grad) {
        auto& gb = self.parents[2]->grad_buffer();
        for (std::size_t oc = 0; oc < g.o; ++oc) {
          const double* row = dout + oc * g.col_cols();
          double acc = 0.0;
          for (std::size_t j = 0; j < g.col_cols(); ++j) acc += row[j];
          gb[oc] += acc;
        }
      }
    }
  });
}

Var max_pool2d(const Var& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require(x.value().rank() == 4, "max_pool2d: expects [N, C, H, W]");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h + 2 * pad >= kernel && w + 2 * pad >= kernel, "max_pool2d: kernel larger than input");
  const std::size_t ho = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kernel) / stride + 1;
  Tensor out(Shape{n, c, ho, wo});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = x.value().data() + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const std::size_t idx = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            if (src[idx] > best) {
              best = src[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (plane * ho + oy) * wo + ox;
        out[o] = best;
        argmax[o] = plane * h * w + best_idx;
      }
    }
  }
  return make_result(std::move(out), {x.node()}, [argmax = std::move(argmax)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
  });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormBuffers& buffers,
                 bool training) {
  require(x.value().rank() == 4, "batch_norm2d: expects [N, C, H, W]");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.numel() == c && beta.numel() == c, "batch_norm2d: affine size mismatch");
  if (buffers.running_mean.empty()) {
    buffers.running_mean = Tensor(Shape{c}, 0.0);
    buffers.running_var = Tensor(Shape{c}, 1.0);
  }
  const double count = static_cast<double>(n * hw);
  Tensor mu(Shape{c}), inv_std(Shape{c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double m = 0.0, v = 0.0;
    if (training) {
      for (std::size_t s = 0; s < n; ++s) {
        const double* p = x.value().data() + (s * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) m += p[j];
      }
      m /= count;
      for (std::size_t s = 0; s < n; ++s) {
        const double* p = x.value().data() + (s * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) v += (p[j] - m) * (p[j] - m);
      }
      v /= count;
      if (grad_enabled()) {
        const double unbiased = count > 1 ? v * count / (count - 1) : v;
        buffers.running_mean[ch] = (1 - buffers.momentum) * buffers.running_mean[ch] + buffers.momentum * m;
        buffers.running_var[ch] = (1 - buffers.momentum) * buffers.running_var[ch] + buffers.momentum * unbiased;
      }
    } else {
      m = buffers.running_mean[ch];
      v = buffers.running_var[ch];
    }
    mu[ch] = m;
    inv_std[ch] = 1.0 / std::sqrt(v + buffers.eps);
  }
  Tensor out = Tensor::zeros_like(x.value());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const double xhat = (x.value()[base + j] - mu[ch]) * inv_std[ch];
        out[base + j] = gamma.value()[ch] * xhat + beta.value()[ch];
      }
    }
  }
  return make_result(std::move(out), {x.node(), gamma.node(), beta.node()},
                     [n, c, hw, count, training, mu, inv_std](Node& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t base = (s * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          const double xhat = (px->value[base + j] - mu[ch]) * inv_std[ch];
          sum_dy += self.grad[base + j];
          sum_dy_xhat += self.grad[base + j] * xhat;
        }
      }
      if (wants(pg)) pg->grad_buffer()[ch] += sum_dy_xhat;
      if (wants(pb)) pb->grad_buffer()[ch] += sum_dy;
      if (!wants(px)) continue;
      auto& gx = px->grad_buffer();
      const double gam = pg->value[ch];
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t base = (s * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          if (training) {
            const double xhat = (px->value[base + j] - mu[ch]) * inv_std[ch];
            gx[base + j] += gam * inv_std[ch] / count *
                            (count * self.grad[base + j] - sum_dy - xhat * sum_dy_xhat);
          } else {
            gx[base + j] += gam * inv_std[ch] * self.grad[base + j];
          }
        }
      }
    }
  });
}

// ---- similarity primitives ---------------------------------------------

Var pairwise_sqdist(const Var& q, const Var& k) {
  require(q.value().rank() == 2 && k.value().rank() == 2 && q.dim(1) == k.dim(1),
          "pairwise_sqdist: embedding widths differ");
  const std::size_t b1 = q.dim(0), b2 = k.dim(0), d = q.dim(1);
  Tensor out(Shape{b1, b2});
  const auto& kt = kernels::active();
  for (std::size_t i = 0; i < b1; ++i) {
    for (std::size_t j = 0; j < b2; ++j) {
      out.at(i, j) = kt.sqdist(q.value().data() + i * d, k.value().data() + j * d, d);
    }
  }
  return make_result(std::move(out), {q.node(), k.node()}, [b1, b2, d](Node& self) {
    auto& pq = self.parents[0];
    auto& pk = self.parents[1];
    const auto& kt = kernels::active();
    std::vector<double> diff(d);
    for (std::size_t i = 0; i < b1; ++i) {
      for (std::size_t j = 0; j < b2; ++j) {
        const double up = 2.0 * self.grad.at(i, j);
        if (up == 0.0) continue;
        const double* qi = pq->value.data() + i * d;
        const double* kj = pk->value.data() + j * d;
        for (std::size_t t = 0; t < d; ++t) diff[t] = qi[t] - kj[t];
        if (wants(pq)) kt.axpy(up, diff.data(), pq->grad_buffer().data() + i * d, d);
        if (wants(pk)) kt.axpy(-up, diff.data(), pk->grad_buffer().data() + j * d, d);
      }
    }
  });
}

Var pairwise_cosine(const Var& q, const Var& k) {
  require(q.value().rank() == 2 && k.value().rank() == 2 && q.dim(1) == k.dim(1),
          "pairwise_cosine: embedding widths differ");
  const std::size_t b1 = q.dim(0), b2 = k.dim(0), d = q.dim(1);
  const auto& kt = kernels::active();
  std::vector<double> nq(b1), nk(b2);
  for (std::size_t i = 0; i < b1; ++i) {
    const double* r = q.value().data() + i * d;
    nq[i] = std::sqrt(kt.dot(r, r, d));
  }
  for (std::size_t j = 0; j < b2; ++j) {
    const double* r = k.value().data() + j * d;
    nk[j] = std::sqrt(kt.dot(r, r, d));
  }
  Tensor out(Shape{b1, b2});
  for (std::size_t i = 0; i < b1; ++i) {
    for (std::size_t j = 0; j < b2; ++j) {
      if (nq[i] == 0.0 || nk[j] == 0.0) continue;
      out.at(i, j) = kt.dot(q.value().data() + i * d, k.value().data() + j * d, d) / (nq[i] * nk[j]);
    }
  }
  return make_result(std::move(out), {q.node(), k.node()}, [b1, b2, d, nq, nk](Node& self) {
    auto& pq = self.parents[0];
    auto& pk = self.parents[1];
    const auto& kt = kernels::active();
    for (std::size_t i = 0; i < b1; ++i) {
      if (nq[i] == 0.0) continue;
      const double* qi = pq->value.data() + i * d;
      for (std::size_t j = 0; j < b2; ++j) {
        if (nk[j] == 0.0) continue;
        const double up = self.grad.at(i, j);
        if (up == 0.0) continue;
        const double* kj = pk->value.data() + j * d;
        const double c = self.value.at(i, j);
        // d cos / d q = k / (|q||k|) - cos * q / |q|^2
        if (wants(pq)) {
          double* g = pq->grad_buffer().data() + i * d;
          kt.axpy(up / (nq[i] * nk[j]), kj, g, d);
          kt.axpy(-up * c / (nq[i] * nq[i]), qi, g, d);
        }
        if (wants(pk)) {
          double* g = pk->grad_buffer().data() + j * d;
          kt.axpy(up / (nq[i] * nk[j]), qi, g, d);
          kt.axpy(-up * c / (nk[j] * nk[j]), kj, g, d);
        }
      }
    }
  });
}

// ---- losses ------------------------------------------------------------

Var contrastive_sum(const Var& s, const Tensor& positive_mask, double alpha) {
  require(s.shape() == positive_mask.shape(), "contrastive_sum: mask shape " +
                                                  shape_str(positive_mask.shape()) +
                                                  " does not match scores " + shape_str(s.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < s.numel(); ++i) {
    const double v = s.value()[i];
    acc += positive_mask[i] != 0.0 ? alpha * (1.0 - v) * (1.0 - v) : v * v;
  }
  return make_result(Tensor::scalar(acc), {s.node()}, [positive_mask, alpha](Node& self) {
    auto& p = self.parents[0];
    auto& g = p->grad_buffer();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double v = p->value[i];
      g[i] += up * (positive_mask[i] != 0.0 ? -2.0 * alpha * (1.0 - v) : 2.0 * v);
    }
  });
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  require(logits.value().rank() == 2 && logits.dim(0) == labels.size(),
          "softmax_cross_entropy: label count must equal row count");
  const std::size_t b = logits.dim(0), n = logits.dim(1);
  Tensor prob(Shape{b, n});
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < n,
            "softmax_cross_entropy: label out of range");
    const double* z = logits.value().data() + i * n;
    const double mx = *std::max_element(z, z + n);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(z[j] - mx);
    for (std::size_t j = 0; j < n; ++j) prob.at(i, j) = std::exp(z[j] - mx) / denom;
    loss -= (z[labels[i]] - mx) - std::log(denom);
  }
  loss /= static_cast<double>(b);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result(Tensor::scalar(loss), {logits.node()}, [prob, lab, b, n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0] / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double target = static_cast<int>(j) == lab[i] ? 1.0 : 0.0;
        g.at(i, j) += up * (prob.at(i, j) - target);
      }
    }
  });
}

// ---- templates ---------------------------------------------------------

Var weighted_class_mean(const Var& weights, const Tensor& rows, std::span<const int> labels,
                        std::size_t num_classes) {
  const std::size_t k = labels.size();
  require(weights.numel() == k && rows.rank() >= 1 && rows.dim(0) == k,
          "weighted_class_mean: weights, rows and labels must agree on k");
  const std::size_t width = rows.row_size();
  Tensor out(Shape{num_classes, width});
  std::vector<double> wsum(num_classes, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < num_classes,
            "weighted_class_mean: label out of range");
    const auto c = static_cast<std::size_t>(labels[i]);
    wsum[c] += weights.value()[i];
    kernels::active().axpy(weights.value()[i], rows.data() + i * width, out.data() + c * width,
                           width);
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (wsum[c] == 0.0) continue;
    for (std::size_t j = 0; j < width; ++j) out.at(c, j) /= wsum[c];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result(std::move(out), {weights.node()},
                     [rows, lab, wsum, width](Node& self) {
    // d T_c / d w_i = (x_i - T_c) / W_c for members of class c.
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < lab.size(); ++i) {
      const auto c = static_cast<std::size_t>(lab[i]);
      if (wsum[c] == 0.0) continue;
      double acc = 0.0;
      for (std::size_t j = 0; j < width; ++j) {
        acc += self.grad.at(c, j) * (rows[i * width + j] - self.value.at(c, j));
      }
      g[i] += acc / wsum[c];
    }
  });
}

}  // namespace crossfi::ag
