// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over moerace::Tensor.
//
// A Tape records every operation in execution order. Values are immutable
// once recorded; Var is a lightweight handle (tape pointer + node id).
// backward() walks the tape in exact reverse order and accumulates
// gradients into per-node buffers. Nodes that do not depend on any
// requires_grad leaf carry no backward closure and are skipped.
//
// Broadcasting is limited to trailing-dimension expansion: in add/sub/mul
// the second operand's shape must equal the first's or be a suffix of it.
// Everything else (e.g. per-sample modulation over a token axis) goes
// through broadcast_axis explicitly.
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "moerace/tensor.hpp"

namespace moerace {

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradient buffers handed to an op's backward closure, one per parent.
class GradSink {
 public:
  bool wants(std::size_t parent) const;
  // Accumulator for parent `parent`, zero-initialized on first access.
  Tensor& grad(std::size_t parent);

 private:
  friend class Tape;
  GradSink(Tape& tape, std::span<const std::size_t> parents) : tape_(tape), parents_(parents) {}

  Tape& tape_;
  std::span<const std::size_t> parents_;
};

class Gradients {
 public:
  // Gradient of the loss w.r.t. v; all zeros when v did not influence it.
  const Tensor& operator[](const Var& v) const;

 private:
  friend class Tape;
  mutable std::vector<Tensor> grads_;
  mutable std::vector<bool> present_;  // absent entries are materialized as zeros on access
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, const Tensor& out, GradSink& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op result. `backward` is dropped when no parent needs a gradient.
  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward);

  Gradients backward(const Var& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  friend class GradSink;

  struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // stable addresses: closures keep pointers to values
  std::vector<Tensor>* active_grads_ = nullptr;
  std::vector<bool>* active_present_ = nullptr;
};

// ---- operations -----------------------------------------------------------

Var matmul(const Var& a, const Var& b);  // (M,K) x (K,N)
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var square(const Var& a);

Var gelu(const Var& a);  // exact: x * Phi(x)
Var sigmoid(const Var& a);
Var softmax(const Var& a);                      // over the last axis
Var layer_norm(const Var& a, double eps = 1e-6);  // over the last axis, no affine

Var sum(const Var& a);
Var mean(const Var& a);

Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, std::vector<std::size_t> axes);
Var transpose(const Var& a);  // rank-2 only
// Repeats an extent-1 axis n times.
Var broadcast_axis(const Var& a, std::size_t axis, std::size_t n);
Var slice_last(const Var& a, std::size_t begin, std::size_t length);

// Row = slice along the first axis.
Var gather_rows(const Var& a, std::span<const std::size_t> rows);
Var scatter_rows(const Var& a, std::span<const std::size_t> rows, std::size_t total_rows);
Var take(const Var& a, std::span<const std::size_t> flat);  // -> rank-1
Var scale_rows(const Var& a, const Var& factors);            // a (n,...) * factors (n)

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---- evaluation helpers ---------------------------------------------------

using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

struct Evaluation {
  Tensor value;
  std::vector<Tensor> gradients;  // one per input, same order
};

// Runs graph_fn on fresh leaves for `inputs`; gradients require a scalar output.
Evaluation evaluate(const GraphFn& graph_fn, std::span<const Tensor> inputs, bool with_gradients = true);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

// max_i |a_i - b_i| / max(max_i |b_i|, floor).
double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12);

}  // namespace moerace
