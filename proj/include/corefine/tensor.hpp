/*
 * Copyright 2026 The corefine Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace corefine {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Graph;

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first adjoint lands
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

/// Dense row-major array with an optional gradient accumulator.
///
/// Copies share storage; values are never modified by operations. Only
/// leaves (parameters) are mutated in place, by the optimizer.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> values() const { return impl_->data; }
  std::span<T> mutable_values() { return impl_->data; }
  T item() const;
  T operator[](std::size_t flat) const { return impl_->data[flat]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient accumulator; zeros when nothing has been accumulated yet.
  std::vector<T> grad() const;
  void zero_grad();

  /// Fresh leaf holding a copy of the values, cut from any recording.
  Tensor detach() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Ordered record of executed operations.
///
/// Constructing a graph makes it the active recorder for its scalar type on
/// the current thread; destruction restores the previously active one.
/// Operations whose inputs require gradients append a node while a graph is
/// active. `backward` replays the adjoints in exact reverse order.
template <typename T>
class Graph {
 public:
  using Adjoint = std::function<void(std::span<const T> out_grad)>;

  struct Node {
    std::string op;
    std::shared_ptr<detail::TensorImpl<T>> output;
    Adjoint adjoint;
  };

  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* active();

  void record(std::string op, const Tensor<T>& output, Adjoint adjoint);

  /// Accumulates dLoss/dLeaf into every reachable leaf that requires grad.
  /// Intermediate accumulators are reset first, so repeated calls add to the
  /// leaves exactly once per call.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

 private:
  std::vector<Node> nodes_;
  Graph* previous_ = nullptr;
};

namespace debug {

/// Scales the incoming adjoint of every node recorded under `op`. Used only to
/// build negative controls for the gradient checker.
struct AdjointFault {
  std::string op;
  double scale = 1.01;
};

void set_adjoint_fault(std::optional<AdjointFault> fault);
const std::optional<AdjointFault>& adjoint_fault();

/// While enabled, the data-dependent choices of relu and topk_indices are
/// folded into a running hash, so a caller can tell whether two evaluations
/// followed the same piecewise-smooth branch.
void set_branch_trace(bool enabled);
std::uint64_t branch_trace();

}  // namespace debug

enum class Activation { kSigmoid, kTanh, kRelu };
enum class BinaryOp { kAdd, kSub, kMul, kDiv };

// Elementwise binary op. `b` either matches `a` or is aligned to a's trailing
// axes with every extent equal or 1.
template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryOp kind);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryOp::kAdd); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryOp::kSub); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryOp::kMul); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryOp::kDiv); }

/// scale * x + shift, elementwise.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift);
template <typename T>
Tensor<T> log(const Tensor<T>& x);

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Activation::kSigmoid); }
template <typename T>
Tensor<T> tanh(const Tensor<T>& x) { return activation(x, Activation::kTanh); }
template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::kRelu); }

// [..., m, k] x [..., k, n]. `b` may be rank 2 and is then shared across
// the leading batch axes of `a`.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);

// Cross-correlation. x [B,C,H,W], w [O,C,kh,kw] with odd kernel extents.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t padding);

/// Nearest-neighbour upsampling of the last two axes by an integer factor.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim = false);
template <typename T>
Tensor<T> mean(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim = false);
/// Sum of every element, shape {1}.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// Rows of `x` along axis 0, in the given order. Duplicates scatter-add on
/// the way back.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices);

/// Indices of the k largest values, ordered by value descending then index
/// ascending. Not differentiated.
template <typename T>
std::vector<std::size_t> topk_indices(std::span<const T> values, std::size_t k);

}  // namespace corefine
