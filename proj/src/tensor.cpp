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

#include "corefine/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "gemm.hpp"

namespace corefine {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

///////////////////////////////////////////
// Tensor
///////////////////////////////////////////

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  for (auto extent : shape) {
    if (extent == 0) throw std::invalid_argument("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor of shape " + shape_str(shape) + " cannot hold " +
                                std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (impl_->grad.empty()) return std::vector<T>(numel(), T{0});
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  impl_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data);
}

///////////////////////////////////////////
// Graph
///////////////////////////////////////////

namespace {

template <typename T>
Graph<T>*& active_graph() {
  thread_local Graph<T>* graph = nullptr;
  return graph;
}

std::optional<debug::AdjointFault>& fault_slot() {
  thread_local std::optional<debug::AdjointFault> fault;
  return fault;
}

struct BranchTrace {
  bool enabled = false;
  std::uint64_t hash = 0;
};

BranchTrace& trace_slot() {
  thread_local BranchTrace trace;
  return trace;
}

void trace_fold(std::uint64_t value) {
  auto& t = trace_slot();
  t.hash = (t.hash ^ value) * 0x100000001B3ull;
}

}  // namespace

namespace debug {

void set_adjoint_fault(std::optional<AdjointFault> fault) { fault_slot() = std::move(fault); }
const std::optional<AdjointFault>& adjoint_fault() { return fault_slot(); }

void set_branch_trace(bool enabled) { trace_slot() = BranchTrace{enabled, 0}; }
std::uint64_t branch_trace() { return trace_slot().hash; }

}  // namespace debug

template <typename T>
Graph<T>::Graph() : previous_(active_graph<T>()) {
  active_graph<T>() = this;
}

template <typename T>
Graph<T>::~Graph() {
  active_graph<T>() = previous_;
}

template <typename T>
Graph<T>* Graph<T>::active() {
  return active_graph<T>();
}

template <typename T>
void Graph<T>::record(std::string op, const Tensor<T>& output, Adjoint adjoint) {
  output.impl()->requires_grad = true;
  output.impl()->is_leaf = false;
  nodes_.push_back(Node{std::move(op), output.impl(), std::move(adjoint)});
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward needs a scalar root, got shape " + shape_str(loss.shape()));
  }
  for (auto& node : nodes_) node.output->grad.clear();
  auto& root = loss.impl()->grad;
  if (root.empty()) root.assign(1, T{0});
  root[0] += T{1};

  const auto& fault = debug::adjoint_fault();
  std::vector<T> scaled;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const auto& g = it->output->grad;
    if (g.empty()) continue;
    if (fault && fault->op == it->op) {
      scaled.assign(g.begin(), g.end());
      for (auto& v : scaled) v *= static_cast<T>(fault->scale);
      it->adjoint(scaled);
    } else {
      it->adjoint(g);
    }
  }
}

///////////////////////////////////////////
// Operation helpers
///////////////////////////////////////////

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;

// Active graph if any of the inputs participates in differentiation.
template <typename T>
Graph<T>* recorder(std::initializer_list<const Tensor<T>*> inputs) {
  auto* graph = Graph<T>::active();
  if (!graph) return nullptr;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return graph;
  }
  return nullptr;
}

// Gradient accumulator of an input, or an empty span when it takes none.
template <typename T>
std::span<T> sink(const ImplPtr<T>& impl) {
  if (!impl->requires_grad) return {};
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T{0});
  return impl->grad;
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// For every element of `full` (row-major), the flat offset obtained by
// applying `strides` to its multi-index.
std::vector<std::size_t> index_map(const Shape& full, const std::vector<std::size_t>& strides) {
  std::vector<std::size_t> map(shape_numel(full));
  std::vector<std::size_t> counter(full.size(), 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    map[flat] = offset;
    for (std::size_t axis = full.size(); axis-- > 0;) {
      if (++counter[axis] < full[axis]) {
        offset += strides[axis];
        break;
      }
      offset -= strides[axis] * (full[axis] - 1);
      counter[axis] = 0;
    }
  }
  return map;
}

// Offsets into `b` for each element of `a` under trailing-axis broadcasting.
std::vector<std::size_t> broadcast_map(const Shape& a, const Shape& b) {
  auto fail = [&] {
    return std::invalid_argument("cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
  };
  if (b.size() > a.size()) throw fail();
  auto b_strides = row_major_strides(b);
  std::vector<std::size_t> strides(a.size(), 0);
  auto lead = a.size() - b.size();
  for (std::size_t j = 0; j < b.size(); ++j) {
    if (b[j] == a[lead + j]) {
      strides[lead + j] = b_strides[j];
    } else if (b[j] != 1) {
      throw fail();
    }
  }
  return index_map(a, strides);
}

std::size_t check_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  return axis;
}

}  // namespace

///////////////////////////////////////////
// Elementwise
///////////////////////////////////////////

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryOp kind) {
  const auto n = a.numel();
  const bool same = a.shape() == b.shape();
  std::vector<std::size_t> map;
  if (!same) map = broadcast_map(a.shape(), b.shape());
  auto bi = [&](std::size_t i) { return same ? i : map[i]; };

  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(n);
  switch (kind) {
    case BinaryOp::kAdd:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[bi(i)];
      break;
    case BinaryOp::kSub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[bi(i)];
      break;
    case BinaryOp::kMul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[bi(i)];
      break;
    case BinaryOp::kDiv:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / bv[bi(i)];
      break;
  }
  Tensor<T> result(a.shape(), std::move(out));

  if (auto* g = recorder({&a, &b})) {
    static constexpr const char* kNames[] = {"add", "sub", "mul", "div"};
    g->record(kNames[static_cast<int>(kind)], result,
              [ai = a.impl(), bimpl = b.impl(), map = std::move(map), same, kind](std::span<const T> go) {
                auto da = sink(ai);
                auto db = sink(bimpl);
                const auto& x = ai->data;
                const auto& y = bimpl->data;
                auto j = [&](std::size_t i) { return same ? i : map[i]; };
                for (std::size_t i = 0; i < go.size(); ++i) {
                  switch (kind) {
                    case BinaryOp::kAdd:
                      if (!da.empty()) da[i] += go[i];
                      if (!db.empty()) db[j(i)] += go[i];
                      break;
                    case BinaryOp::kSub:
                      if (!da.empty()) da[i] += go[i];
                      if (!db.empty()) db[j(i)] -= go[i];
                      break;
                    case BinaryOp::kMul:
                      if (!da.empty()) da[i] += go[i] * y[j(i)];
                      if (!db.empty()) db[j(i)] += go[i] * x[i];
                      break;
                    case BinaryOp::kDiv: {
                      const T yi = y[j(i)];
                      if (!da.empty()) da[i] += go[i] / yi;
                      if (!db.empty()) db[j(i)] -= go[i] * x[i] / (yi * yi);
                      break;
                    }
                  }
                }
              });
  }
  return result;
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * xv[i] + shift;
  Tensor<T> result(x.shape(), std::move(out));
  if (auto* g = recorder({&x})) {
    g->record("affine", result, [xi = x.impl(), scale](std::span<const T> go) {
      auto dx = sink(xi);
      for (std::size_t i = 0; i < go.size(); ++i) dx[i] += scale * go[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  Tensor<T> result(x.shape(), std::move(out));
  if (auto* g = recorder({&x})) {
    g->record("log", result, [xi = x.impl()](std::span<const T> go) {
      auto dx = sink(xi);
      for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i] / xi->data[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  std::vector<T> out(x.numel());
  auto xv = x.values();
  switch (kind) {
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) {
        // Branch on sign so exp never overflows.
        if (xv[i] >= 0) {
          out[i] = T{1} / (T{1} + std::exp(-xv[i]));
        } else {
          const T e = std::exp(xv[i]);
          out[i] = e / (T{1} + e);
        }
      }
      break;
    case Activation::kTanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
      break;
    case Activation::kRelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0 ? xv[i] : T{0};
      if (trace_slot().enabled) {
        trace_fold(out.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
          if (xv[i] > 0) trace_fold(i);
        }
      }
      break;
  }
  Tensor<T> result(x.shape(), std::move(out));
  if (auto* g = recorder({&x})) {
    static constexpr const char* kNames[] = {"sigmoid", "tanh", "relu"};
    g->record(kNames[static_cast<int>(kind)], result,
              [xi = x.impl(), yi = result.impl(), kind](std::span<const T> go) {
                auto dx = sink(xi);
                const auto& y = yi->data;
                for (std::size_t i = 0; i < go.size(); ++i) {
                  switch (kind) {
                    case Activation::kSigmoid:
                      dx[i] += go[i] * y[i] * (T{1} - y[i]);
                      break;
                    case Activation::kTanh:
                      dx[i] += go[i] * (T{1} - y[i] * y[i]);
                      break;
                    case Activation::kRelu:
                      if (xi->data[i] > 0) dx[i] += go[i];
                      break;
                  }
                }
              });
  }
  return result;
}

///////////////////////////////////////////
// Linear algebra and layout
///////////////////////////////////////////

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw std::invalid_argument("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  const auto m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const auto kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const bool shared_b = b_batch.empty();
  if (k != kb || (!shared_b && a_batch != b_batch)) {
    throw std::invalid_argument("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto batch = shape_numel(a_batch);
  Shape out_shape = a_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<T> out(batch * m * n, T{0});
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm(false, false, m, n, k, ap + s * m * k, bp + (shared_b ? 0 : s * k * n), out.data() + s * m * n);
  }
  Tensor<T> result(std::move(out_shape), std::move(out));

  if (auto* g = recorder({&a, &b})) {
    g->record("matmul", result, [ai = a.impl(), bi = b.impl(), batch, m, n, k, shared_b](std::span<const T> go) {
      auto da = sink(ai);
      auto db = sink(bi);
      for (std::size_t s = 0; s < batch; ++s) {
        const T* gs = go.data() + s * m * n;
        const T* as = ai->data.data() + s * m * k;
        const T* bs = bi->data.data() + (shared_b ? 0 : s * k * n);
        if (!da.empty()) detail::gemm(false, true, m, k, n, gs, bs, da.data() + s * m * k);
        if (!db.empty()) detail::gemm(true, false, k, n, m, as, gs, db.data() + (shared_b ? 0 : s * k * n));
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw std::invalid_argument("transpose needs rank >= 2, got " + shape_str(x.shape()));
  const auto r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  const auto batch = x.numel() / (r * c);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[s * r * c + j * r + i] = xv[s * r * c + i * c + j];
    }
  }
  Tensor<T> result(std::move(shape), std::move(out));
  if (auto* g = recorder({&x})) {
    g->record("transpose", result, [xi = x.impl(), batch, r, c](std::span<const T> go) {
      auto dx = sink(xi);
      for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) dx[s * r * c + i * c + j] += go[s * r * c + j * r + i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> result(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
  if (auto* g = recorder({&x})) {
    g->record("reshape", result, [xi = x.impl()](std::span<const T> go) {
      auto dx = sink(xi);
      for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i];
    });
  }
  return result;
}

///////////////////////////////////////////
// Softmax
///////////////////////////////////////////

namespace {

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  check_axis(shape, axis);
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
std::vector<T> softmax_values(std::span<const T> x, AxisSplit s, bool log_space) {
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T peak = x[base];
      for (std::size_t j = 1; j < s.extent; ++j) peak = std::max(peak, x[base + j * s.inner]);
      T total = 0;
      for (std::size_t j = 0; j < s.extent; ++j) total += std::exp(x[base + j * s.inner] - peak);
      if (log_space) {
        const T log_total = std::log(total);
        for (std::size_t j = 0; j < s.extent; ++j) {
          out[base + j * s.inner] = x[base + j * s.inner] - peak - log_total;
        }
      } else {
        for (std::size_t j = 0; j < s.extent; ++j) {
          out[base + j * s.inner] = std::exp(x[base + j * s.inner] - peak) / total;
        }
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis);
  Tensor<T> result(x.shape(), softmax_values(x.values(), s, false));
  if (auto* g = recorder({&x})) {
    g->record("softmax", result, [xi = x.impl(), yi = result.impl(), s](std::span<const T> go) {
      auto dx = sink(xi);
      const auto& y = yi->data;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < s.extent; ++j) dot += go[base + j * s.inner] * y[base + j * s.inner];
          for (std::size_t j = 0; j < s.extent; ++j) {
            const auto idx = base + j * s.inner;
            dx[idx] += y[idx] * (go[idx] - dot);
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis);
  Tensor<T> result(x.shape(), softmax_values(x.values(), s, true));
  if (auto* g = recorder({&x})) {
    g->record("log_softmax", result, [xi = x.impl(), yi = result.impl(), s](std::span<const T> go) {
      auto dx = sink(xi);
      const auto& y = yi->data;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          T total = 0;
          for (std::size_t j = 0; j < s.extent; ++j) total += go[base + j * s.inner];
          for (std::size_t j = 0; j < s.extent; ++j) {
            const auto idx = base + j * s.inner;
            dx[idx] += go[idx] - std::exp(y[idx]) * total;
          }
        }
      }
    });
  }
  return result;
}

///////////////////////////////////////////
// Convolution and resampling
///////////////////////////////////////////

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

// col[(c*kh + i)*kw + j][oy*out_w + ox] = x[c][oy*stride + i - pad][ox*stride + j - pad]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const auto p = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            row[oy * g.out_w + ox] = inside ? x[(c * g.height + iy) * g.width + ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
  const auto p = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            dx[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw std::invalid_argument("conv2d needs rank-4 input and weight, got " + shape_str(x.shape()) + " and " +
                                shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(x.shape()) + ", weight " +
                                shape_str(w.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, padding, 0, 0};
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw std::invalid_argument("conv2d kernel extents must be odd");
  if (g.height + 2 * padding < g.kh || g.width + 2 * padding < g.kw) {
    throw std::invalid_argument("conv2d padding leaves no output for input " + shape_str(x.shape()));
  }
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;

  const auto in_size = g.channels * g.height * g.width;
  const auto out_size = g.out_channels * g.out_pixels();
  std::vector<T> col(g.patch() * g.out_pixels());
  std::vector<T> out(g.batch * out_size, T{0});
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(x.values().data() + b * in_size, g, col.data());
    detail::gemm(false, false, g.out_channels, g.out_pixels(), g.patch(), w.values().data(), col.data(),
                 out.data() + b * out_size);
  }
  Tensor<T> result(Shape{g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out));

  if (auto* rec = recorder({&x, &w})) {
    rec->record("conv2d", result, [xi = x.impl(), wi = w.impl(), g, in_size, out_size](std::span<const T> go) {
      auto dx = sink(xi);
      auto dw = sink(wi);
      std::vector<T> col(g.patch() * g.out_pixels());
      for (std::size_t b = 0; b < g.batch; ++b) {
        const T* gb = go.data() + b * out_size;
        if (!dw.empty()) {
          im2col(xi->data.data() + b * in_size, g, col.data());
          detail::gemm(false, true, g.out_channels, g.patch(), g.out_pixels(), gb, col.data(), dw.data());
        }
        if (!dx.empty()) {
          std::fill(col.begin(), col.end(), T{0});
          detail::gemm(true, false, g.patch(), g.out_pixels(), g.out_channels, wi->data.data(), gb, col.data());
          col2im(col.data(), g, dx.data() + b * in_size);
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("upsample factor must be >= 1");
  if (x.rank() < 2) throw std::invalid_argument("upsample needs rank >= 2, got " + shape_str(x.shape()));
  if (factor == 1) return x;
  const auto h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const auto planes = x.numel() / (h * w);
  const auto oh = h * factor, ow = w * factor;
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  std::vector<T> out(planes * oh * ow);
  auto xv = x.values();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        out[(p * oh + y) * ow + xx] = xv[(p * h + y / factor) * w + xx / factor];
      }
    }
  }
  Tensor<T> result(std::move(shape), std::move(out));
  if (auto* g = recorder({&x})) {
    g->record("upsample_nearest", result, [xi = x.impl(), planes, h, w, factor](std::span<const T> go) {
      auto dx = sink(xi);
      const auto oh = h * factor, ow = w * factor;
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t xx = 0; xx < ow; ++xx) {
            dx[(p * h + y / factor) * w + xx / factor] += go[(p * oh + y) * ow + xx];
          }
        }
      }
    });
  }
  return result;
}

///////////////////////////////////////////
// Reductions, concatenation, gathering
///////////////////////////////////////////

namespace {

template <typename T>
Tensor<T> reduce(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim, bool average) {
  const auto& shape = x.shape();
  std::vector<bool> reduced(shape.size(), false);
  for (auto axis : axes) reduced[check_axis(shape, axis)] = true;

  Shape kept_shape = shape;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (reduced[i]) kept_shape[i] = 1;
  }
  auto kept_strides = row_major_strides(kept_shape);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (reduced[i]) kept_strides[i] = 0;
  }
  auto map = index_map(shape, kept_strides);
  const auto out_n = shape_numel(kept_shape);
  const T count = static_cast<T>(x.numel() / out_n);
  const T scale = average ? T{1} / count : T{1};

  std::vector<T> out(out_n, T{0});
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) out[map[i]] += xv[i];
  if (average) {
    for (auto& v : out) v /= count;
  }

  Shape out_shape;
  if (keepdim) {
    out_shape = kept_shape;
  } else {
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (!reduced[i]) out_shape.push_back(shape[i]);
    }
    if (out_shape.empty()) out_shape.push_back(1);
  }
  Tensor<T> result(std::move(out_shape), std::move(out));
  if (auto* g = recorder({&x})) {
    g->record(average ? "mean" : "sum", result, [xi = x.impl(), map = std::move(map), scale](std::span<const T> go) {
      auto dx = sink(xi);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += scale * go[map[i]];
    });
  }
  return result;
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim) {
  return reduce(x, axes, keepdim, false);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim) {
  return reduce(x, axes, keepdim, true);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  std::vector<std::size_t> all(x.rank());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return reduce(x, all, false, false);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat of an empty list");
  const auto& first = parts.front().shape();
  check_axis(first, axis);
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw std::invalid_argument("concat shape mismatch: " + shape_str(first) + " vs " + shape_str(s));
    shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const auto row = shape[axis] * inner;

  std::vector<T> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto chunk = p.dim(axis) * inner;
    auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * chunk, chunk, out.begin() + o * row + offset);
    }
    offset += chunk;
  }
  Tensor<T> result(std::move(shape), std::move(out));

  Graph<T>* g = Graph<T>::active();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (g && any) {
    std::vector<ImplPtr<T>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    g->record("concat", result,
              [impls = std::move(impls), offsets = std::move(offsets), outer, row, inner, axis](std::span<const T> go) {
                for (std::size_t k = 0; k < impls.size(); ++k) {
                  auto dp = sink(impls[k]);
                  if (dp.empty()) continue;
                  const auto chunk = impls[k]->shape[axis] * inner;
                  for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t i = 0; i < chunk; ++i) dp[o * chunk + i] += go[o * row + offsets[k] + i];
                  }
                }
              });
  }
  return result;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices) {
  if (x.rank() < 1) throw std::invalid_argument("gather_rows on a rank-0 tensor");
  if (indices.empty()) throw std::invalid_argument("gather_rows with no indices");
  const auto rows = x.dim(0);
  const auto width = x.numel() / rows;
  std::vector<T> out(indices.size() * width);
  auto xv = x.values();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      throw std::out_of_range("gather_rows index " + std::to_string(indices[r]) + " out of range for " +
                              shape_str(x.shape()));
    }
    std::copy_n(xv.begin() + indices[r] * width, width, out.begin() + r * width);
  }
  Shape shape = x.shape();
  shape[0] = indices.size();
  Tensor<T> result(std::move(shape), std::move(out));
  if (auto* g = recorder({&x})) {
    g->record("gather_rows", result,
              [xi = x.impl(), idx = std::vector<std::size_t>(indices.begin(), indices.end()), width](
                  std::span<const T> go) {
                auto dx = sink(xi);
                for (std::size_t r = 0; r < idx.size(); ++r) {
                  for (std::size_t c = 0; c < width; ++c) dx[idx[r] * width + c] += go[r * width + c];
                }
              });
  }
  return result;
}

template <typename T>
std::vector<std::size_t> topk_indices(std::span<const T> values, std::size_t k) {
  if (k < 1 || k > values.size()) {
    throw std::out_of_range("top-k with k=" + std::to_string(k) + " over " + std::to_string(values.size()) +
                            " values");
  }
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (values[a] != values[b]) return values[a] > values[b];
                      return a < b;
                    });
  order.resize(k);
  if (trace_slot().enabled) {
    // Only the chosen set matters downstream, not its order.
    auto chosen = order;
    std::sort(chosen.begin(), chosen.end());
    trace_fold(values.size());
    for (auto i : chosen) trace_fold(i);
  }
  return order;
}

///////////////////////////////////////////
// Instantiations
///////////////////////////////////////////

#define COREFINE_INSTANTIATE(T)                                                                  \
  template class Tensor<T>;                                                                      \
  template class Graph<T>;                                                                       \
  template Tensor<T> binary(const Tensor<T>&, const Tensor<T>&, BinaryOp);                       \
  template Tensor<T> affine(const Tensor<T>&, T, T);                                             \
  template Tensor<T> log(const Tensor<T>&);                                                      \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> transpose(const Tensor<T>&);                                                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);       \
  template Tensor<T> upsample_nearest(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> sum(const Tensor<T>&, const std::vector<std::size_t>&, bool);               \
  template Tensor<T> mean(const Tensor<T>&, const std::vector<std::size_t>&, bool);              \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                         \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                \
  template std::vector<std::size_t> topk_indices(std::span<const T>, std::size_t);

COREFINE_INSTANTIATE(float)
COREFINE_INSTANTIATE(double)

#undef COREFINE_INSTANTIATE

}  // namespace corefine
