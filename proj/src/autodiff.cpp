// SPDX-License-Identifier: Apache-2.0
#include "moerace/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include <Eigen/Core>
#include <fmt/format.h>

#include "moerace/errors.hpp"

namespace moerace {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (&tape_of(b) != &t) throw ContractError("operands recorded on different tapes");
  return t;
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

// Extent of the repeated block when `b` expands over the leading axes of `a`.
std::size_t broadcast_inner(const char* op, const Var& a, const Var& b) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError(fmt::format("{}: shapes {} and {} are incompatible (second must match or be a trailing suffix)",
                                 op, shape_str(a.shape()), shape_str(b.shape())));
  }
  return b.value().size();
}

std::size_t last_extent(const char* op, const Tensor& t) {
  if (t.rank() == 0) throw ShapeError(fmt::format("{}: needs rank >= 1, got {}", op, shape_str(t.shape())));
  return t.shape().back();
}

std::size_t row_width(const char* op, const Tensor& t) {
  if (t.rank() == 0 || t.shape()[0] == 0) {
    throw ShapeError(fmt::format("{}: needs a non-empty leading axis, got {}", op, shape_str(t.shape())));
  }
  return t.size() / t.shape()[0];
}

template <class F>
Var unary(const Var& a, F&& fn, Tape::BackwardFn backward) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i]);
  return tape_of(a).record(std::move(out), {a}, std::move(backward));
}

}  // namespace

// ---- Var / Tape ----------------------------------------------------------

const Tensor& Var::value() const {
  if (!valid()) throw ContractError("value() on an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return valid() && tape_->requires_grad(id_); }

bool GradSink::wants(std::size_t parent) const { return tape_.requires_grad(parents_[parent]); }

Tensor& GradSink::grad(std::size_t parent) {
  const std::size_t id = parents_[parent];
  auto& grads = *tape_.active_grads_;
  auto& present = *tape_.active_present_;
  if (!present[id]) {
    grads[id] = Tensor(tape_.value(id).shape());
    present[id] = true;
  }
  return grads[id];
}

const Tensor& Gradients::operator[](const Var& v) const {
  const std::size_t id = v.id();
  if (id >= grads_.size()) throw ContractError("Var does not belong to this gradient set");
  if (!present_[id]) {
    grads_[id] = Tensor(shapes_[id]);
    present_[id] = true;
  }
  return grads_[id];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), requires_grad, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.parents.reserve(parents.size());
  for (const Var& p : parents) {
    if (p.tape() != this) throw ContractError("parent recorded on a different tape");
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw ContractError("loss recorded on a different tape");
  if (loss.value().size() != 1) {
    throw ContractError(fmt::format("backward needs a scalar loss, got shape {}", shape_str(loss.shape())));
  }
  Gradients out;
  out.grads_.resize(nodes_.size());
  out.present_.assign(nodes_.size(), false);
  out.shapes_.reserve(nodes_.size());
  for (const Node& n : nodes_) out.shapes_.push_back(n.value.shape());

  out.grads_[loss.id()] = Tensor::full(loss.shape(), 1.0);
  out.present_[loss.id()] = true;
  active_grads_ = &out.grads_;
  active_present_ = &out.present_;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!out.present_[id] || !node.backward) continue;
    GradSink sink(*this, node.parents);
    node.backward(out.grads_[id], node.value, sink);
  }
  active_grads_ = nullptr;
  active_present_ = nullptr;
  return out;
}

// ---- linear algebra --------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw ShapeError(fmt::format("matmul: shapes {} and {} are incompatible", shape_str(x.shape()),
                                 shape_str(y.shape())));
  }
  const auto m = static_cast<Eigen::Index>(x.dim(0));
  const auto k = static_cast<Eigen::Index>(x.dim(1));
  const auto n = static_cast<Eigen::Index>(y.dim(1));
  Tensor out({x.dim(0), y.dim(1)});
  MatrixMap(out.data(), m, n).noalias() = ConstMatrixMap(x.data(), m, k) * ConstMatrixMap(y.data(), k, n);
  const Tensor* xp = &x;
  const Tensor* yp = &y;
  return tape.record(std::move(out), {a, b}, [xp, yp, m, k, n](const Tensor& g, const Tensor&, GradSink& sink) {
    ConstMatrixMap gm(g.data(), m, n);
    if (sink.wants(0)) {
      MatrixMap(sink.grad(0).data(), m, k).noalias() += gm * ConstMatrixMap(yp->data(), k, n).transpose();
    }
    if (sink.wants(1)) {
      MatrixMap(sink.grad(1).data(), k, n).noalias() += ConstMatrixMap(xp->data(), m, k).transpose() * gm;
    }
  });
}

// ---- elementwise ----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  const std::size_t inner = broadcast_inner("add", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i % inner];
  return tape.record(std::move(out), {a, b}, [inner](const Tensor& g, const Tensor&, GradSink& sink) {
    if (sink.wants(0)) {
      Tensor& ga = sink.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (sink.wants(1)) {
      Tensor& gb = sink.grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  const std::size_t inner = broadcast_inner("sub", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i % inner];
  return tape.record(std::move(out), {a, b}, [inner](const Tensor& g, const Tensor&, GradSink& sink) {
    if (sink.wants(0)) {
      Tensor& ga = sink.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (sink.wants(1)) {
      Tensor& gb = sink.grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  const std::size_t inner = broadcast_inner("mul", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i % inner];
  const Tensor* xp = &x;
  const Tensor* yp = &y;
  return tape.record(std::move(out), {a, b}, [xp, yp, inner](const Tensor& g, const Tensor&, GradSink& sink) {
    if (sink.wants(0)) {
      Tensor& ga = sink.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*yp)[i % inner];
    }
    if (sink.wants(1)) {
      Tensor& gb = sink.grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i] * (*xp)[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary(a, [factor](double v) { return v * factor; }, [factor](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Var add_scalar(const Var& a, double offset) {
  return unary(a, [offset](double v) { return v + offset; }, [](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var square(const Var& a) {
  const Tensor* xp = &a.value();
  return unary(a, [](double v) { return v * v; }, [xp](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * (*xp)[i] * g[i];
  });
}

Var gelu(const Var& a) {
  const Tensor* xp = &a.value();
  return unary(
      a, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [xp](const Tensor& g, const Tensor&, GradSink& sink) {
        Tensor& ga = sink.grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = (*xp)[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          ga[i] += g[i] * (cdf + v * pdf);
        }
      });
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(const Var& a) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = stable_sigmoid(x[i]);
  return tape.record(std::move(out), {a}, [](const Tensor& g, const Tensor& s, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i] * (1.0 - s[i]);
  });
}

Var softmax(const Var& a) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  const std::size_t n = last_extent("softmax", x);
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * n;
    double* p = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (p[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) p[j] /= total;
  }
  return tape.record(std::move(out), {a}, [n, rows](const Tensor& g, const Tensor& probs, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = probs.data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * p[j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += p[j] * (gr[j] - dot);
    }
  });
}

Var layer_norm(const Var& a, double eps) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  const std::size_t n = last_extent("layer_norm", x);
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (in[j] - mu) * inv;
  }
  return tape.record(std::move(out), {a}, [inv_std, n, rows](const Tensor& g, const Tensor& normalized, GradSink& sink) {
    const Tensor* yp = &normalized;
    Tensor& ga = sink.grad(0);
    const double dn = static_cast<double>(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * n;
      const double* y = yp->data() + r * n;
      double g_mean = 0.0;
      double gy_mean = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        g_mean += gr[j];
        gy_mean += gr[j] * y[j];
      }
      g_mean /= dn;
      gy_mean /= dn;
      const double inv = (*inv_std)[r];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += inv * (gr[j] - g_mean - y[j] * gy_mean);
    }
  });
}

// ---- reductions -------------------------------------------------------------

Var sum(const Var& a) {
  const Tensor& x = a.value();
  double total = 0.0;
  for (double v : x.values()) total += v;
  return tape_of(a).record(Tensor::scalar(total), {a}, [](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    const double s = g.item();
    for (double& v : ga.values()) v += s;
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// ---- layout -------------------------------------------------------------------

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record(std::move(out), {a}, [](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var permute(const Var& a, std::vector<std::size_t> axes) {
  const Tensor& x = a.value();
  const std::size_t rank = x.rank();
  std::vector<std::size_t> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> identity(rank);
  std::iota(identity.begin(), identity.end(), 0);
  if (sorted != identity) {
    throw ShapeError(fmt::format("permute: axes ({}) are not a permutation for shape {}", fmt::join(axes, ","),
                                 shape_str(x.shape())));
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * x.shape()[d];
  Shape out_shape(rank);
  for (std::size_t d = 0; d < rank; ++d) out_shape[d] = x.shape()[axes[d]];

  // source[i] = input flat index for output flat index i
  auto source = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < rank; ++d) src += counter[d] * in_strides[axes[d]];
    (*source)[i] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < out_shape[d]) break;
      counter[d] = 0;
    }
  }
  Tensor out(out_shape);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[(*source)[i]];
  return tape_of(a).record(std::move(out), {a}, [source](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*source)[i]] += g[i];
  });
}

Var transpose(const Var& a) {
  if (a.value().rank() != 2) {
    throw ShapeError(fmt::format("transpose: needs rank 2, got {}", shape_str(a.shape())));
  }
  return permute(a, {1, 0});
}

Var broadcast_axis(const Var& a, std::size_t axis, std::size_t n) {
  const Tensor& x = a.value();
  if (axis >= x.rank() || x.shape()[axis] != 1) {
    throw ShapeError(fmt::format("broadcast_axis: axis {} of {} must have extent 1", axis, shape_str(x.shape())));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
  const std::size_t inner = x.size() / outer;
  Shape shape = x.shape();
  shape[axis] = n;
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(x.data() + o * inner, inner, out.data() + (o * n + r) * inner);
  return tape_of(a).record(std::move(out), {a}, [outer, inner, n](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < inner; ++i) ga[o * inner + i] += g[(o * n + r) * inner + i];
  });
}

Var slice_last(const Var& a, std::size_t begin, std::size_t length) {
  const Tensor& x = a.value();
  const std::size_t n = last_extent("slice_last", x);
  if (begin + length > n) {
    throw ShapeError(fmt::format("slice_last: [{}, {}) exceeds last extent of {}", begin, begin + length,
                                 shape_str(x.shape())));
  }
  const std::size_t rows = x.size() / n;
  Shape shape = x.shape();
  shape.back() = length;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * n + begin, length, out.data() + r * length);
  return tape_of(a).record(std::move(out), {a}, [rows, n, begin, length](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < length; ++j) ga[r * n + begin + j] += g[r * length + j];
  });
}

// ---- select and scatter ---------------------------------------------------------

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  const Tensor& x = a.value();
  const std::size_t width = row_width("gather_rows", x);
  const std::size_t total = x.shape()[0];
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  Shape shape = x.shape();
  shape[0] = idx->size();
  Tensor out(shape);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= total) throw ShapeError(fmt::format("gather_rows: row {} out of range for {}", (*idx)[i], shape_str(x.shape())));
    std::copy_n(x.data() + (*idx)[i] * width, width, out.data() + i * width);
  }
  return tape_of(a).record(std::move(out), {a}, [idx, width](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t j = 0; j < width; ++j) ga[(*idx)[i] * width + j] += g[i * width + j];
  });
}

Var scatter_rows(const Var& a, std::span<const std::size_t> rows, std::size_t total_rows) {
  const Tensor& x = a.value();
  if (x.rank() == 0 || x.shape()[0] != rows.size()) {
    throw ShapeError(fmt::format("scatter_rows: {} rows for source {}", rows.size(), shape_str(x.shape())));
  }
  const std::size_t width = rows.empty() ? shape_numel(Shape(x.shape().begin() + 1, x.shape().end())) : x.size() / rows.size();
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  Shape shape = x.shape();
  shape[0] = total_rows;
  Tensor out(shape);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= total_rows) throw ShapeError(fmt::format("scatter_rows: row {} out of range ({})", (*idx)[i], total_rows));
    for (std::size_t j = 0; j < width; ++j) out[(*idx)[i] * width + j] += x[i * width + j];
  }
  return tape_of(a).record(std::move(out), {a}, [idx, width](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t j = 0; j < width; ++j) ga[i * width + j] += g[(*idx)[i] * width + j];
  });
}

Var take(const Var& a, std::span<const std::size_t> flat) {
  const Tensor& x = a.value();
  auto idx = std::make_shared<std::vector<std::size_t>>(flat.begin(), flat.end());
  Tensor out({idx->size()});
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= x.size()) throw ShapeError(fmt::format("take: index {} out of range for {}", (*idx)[i], shape_str(x.shape())));
    out[i] = x[(*idx)[i]];
  }
  return tape_of(a).record(std::move(out), {a}, [idx](const Tensor& g, const Tensor&, GradSink& sink) {
    Tensor& ga = sink.grad(0);
    for (std::size_t i = 0; i < idx->size(); ++i) ga[(*idx)[i]] += g[i];
  });
}

Var scale_rows(const Var& a, const Var& factors) {
  Tape& tape = tape_of(a, factors);
  const Tensor& x = a.value();
  const Tensor& f = factors.value();
  if (x.rank() == 0 || f.rank() != 1 || f.dim(0) != x.shape()[0]) {
    throw ShapeError(fmt::format("scale_rows: shapes {} and {} are incompatible", shape_str(x.shape()),
                                 shape_str(f.shape())));
  }
  const std::size_t n = f.size();
  const std::size_t width = n == 0 ? 0 : x.size() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = x[r * width + j] * f[r];
  const Tensor* xp = &x;
  const Tensor* fp = &f;
  return tape.record(std::move(out), {a, factors}, [xp, fp, n, width](const Tensor& g, const Tensor&, GradSink& sink) {
    if (sink.wants(0)) {
      Tensor& ga = sink.grad(0);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < width; ++j) ga[r * width + j] += g[r * width + j] * (*fp)[r];
    }
    if (sink.wants(1)) {
      Tensor& gf = sink.grad(1);
      for (std::size_t r = 0; r < n; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < width; ++j) acc += g[r * width + j] * (*xp)[r * width + j];
        gf[r] += acc;
      }
    }
  });
}

// ---- helpers ----------------------------------------------------------------------

Evaluation evaluate(const GraphFn& graph_fn, std::span<const Tensor> inputs, bool with_gradients) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, with_gradients));
  const Var out = graph_fn(tape, leaves);
  Evaluation result{out.value(), {}};
  if (with_gradients) {
    const Gradients grads = tape.backward(out);
    for (const Var& leaf : leaves) result.gradients.push_back(grads[leaf]);
  }
  return result;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_difference_grad: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(const Tensor& a, const Tensor& b, double floor) {
  double scale_ref = floor;
  for (double v : b.values()) scale_ref = std::max(scale_ref, std::abs(v));
  return max_abs_diff(a, b) / scale_ref;
}

}  // namespace moerace
