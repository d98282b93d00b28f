// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tilefuse/error.hpp"

namespace tilefuse {

template <std::floating_point T>
class Tensor;

namespace detail {

/// Receives the upstream gradient of a node and accumulates into the
/// gradient buffers of its parents. A slot is nullptr when the parent does
/// not take part in differentiation.
template <class T>
using BackwardFn = std::function<void(std::span<const T> grad_out, std::span<T* const> parent_grads)>;

template <class T>
struct Node {
  Dims dims;
  std::vector<T> value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<const Node>> parents;
  BackwardFn<T> backward;
};

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace detail

/// Dense row-major array with optional reverse-mode gradient tracking.
///
/// A Tensor is a cheap handle onto an immutable node. Operations create new
/// nodes; when any operand requires a gradient the new node remembers its
/// operands and how to push a gradient back to them.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Dims dims, std::vector<T> values, bool requires_grad = false) {
    validate_dims(dims);
    if (dims_count(dims) != values.size()) {
      throw ShapeError("Tensor: dims " + dims_str(dims) + " hold " + std::to_string(dims_count(dims)) +
                       " elements but " + std::to_string(values.size()) + " values were given");
    }
    if (!detail::all_finite<T>(values)) throw NumericError("Tensor: non-finite value in initializer");
    auto n = std::make_shared<detail::Node<T>>();
    n->dims = std::move(dims);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    node_ = std::move(n);
  }

  static Tensor zeros(Dims dims, bool requires_grad = false) {
    return full(std::move(dims), T(0), requires_grad);
  }

  static Tensor full(Dims dims, T v, bool requires_grad = false) {
    validate_dims(dims);
    std::vector<T> values(dims_count(dims), v);
    return Tensor(std::move(dims), std::move(values), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Dims& dims() const { return node().dims; }
  std::size_t rank() const { return node().dims.size(); }
  std::size_t dim(std::size_t i) const { return node().dims.at(i); }
  std::size_t size() const { return node().value.size(); }
  std::span<const T> data() const { return node().value; }
  const std::vector<T>& values() const { return node().value; }
  T operator[](std::size_t i) const { return node().value[i]; }
  bool requires_grad() const { return node().requires_grad; }

  T item() const {
    if (size() != 1) throw UsageError("Tensor::item: tensor " + dims_str(dims()) + " is not a scalar");
    return node().value[0];
  }

  /// Copy of the values with no graph history.
  Tensor detach(bool requires_grad = false) const { return Tensor(dims(), values(), requires_grad); }

  /// Identity of the underlying node; stable for the life of the handle.
  const void* id() const { return node_.get(); }

  const std::shared_ptr<const detail::Node<T>>& node_ptr() const { return node_; }

  static Tensor from_node(std::shared_ptr<const detail::Node<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  static void validate_dims(const Dims& dims) {
    if (dims.empty()) throw ShapeError("Tensor: empty dim list");
    for (auto e : dims)
      if (e == 0) throw ShapeError("Tensor: zero extent in " + dims_str(dims));
  }

  const detail::Node<T>& node() const {
    if (!node_) throw UsageError("Tensor: use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<const detail::Node<T>> node_;
};

namespace detail {

/// Wraps a freshly computed value as a tensor, recording the graph edge when
/// any input requires a gradient. Rejects non-finite results.
template <class T>
Tensor<T> make_op(const char* op, Dims dims, std::vector<T> value, std::vector<Tensor<T>> inputs,
                  BackwardFn<T> fn) {
  if (!all_finite<T>(value)) throw NumericError(std::string(op) + ": non-finite output");
  auto n = std::make_shared<Node<T>>();
  n->dims = std::move(dims);
  n->value = std::move(value);
  bool rg = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward = std::move(fn);
  }
  return Tensor<T>::from_node(std::move(n));
}

}  // namespace detail

/// Named parameters, iterated in sorted name order.
template <std::floating_point T>
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void insert(const std::string& name, Tensor<T> t) {
    if (!map_.emplace(name, std::move(t)).second) throw UsageError("ParamSet: duplicate parameter '" + name + "'");
  }

  /// Replace an existing entry's tensor.
  void set(const std::string& name, Tensor<T> t) {
    auto it = map_.find(name);
    if (it == map_.end()) throw UsageError("ParamSet: unknown parameter '" + name + "'");
    if (it->second.dims() != t.dims()) shape_fail("ParamSet::set(" + name + ")", it->second.dims(), t.dims());
    it->second = std::move(t);
  }

  const Tensor<T>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw UsageError("ParamSet: unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return map_.count(name) != 0; }
  std::size_t size() const { return map_.size(); }
  bool empty() const { return map_.empty(); }
  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (auto& [_, t] : map_) n += t.size();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(map_.size());
    for (auto& [k, _] : map_) out.push_back(k);
    return out;
  }

  /// Merge another set into this one; names must not collide.
  void merge(const ParamSet& other) {
    for (auto& [k, v] : other) insert(k, v);
  }

  /// Copy whose tensors all carry `requires_grad` as given (values copied).
  ParamSet with_grad(bool requires_grad) const {
    ParamSet out;
    for (auto& [k, v] : map_) out.insert(k, v.detach(requires_grad));
    return out;
  }

  /// Copy where only names satisfying `pred` require gradients.
  template <class Pred>
  ParamSet with_grad_where(Pred pred) const {
    ParamSet out;
    for (auto& [k, v] : map_) out.insert(k, v.detach(pred(k)));
    return out;
  }

 private:
  Map map_;
};

template <std::floating_point T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Reverse-mode gradients of a scalar `loss` with respect to arbitrary tensors.
/// Tensors the loss does not reach get an exact zero gradient.
template <std::floating_point T>
std::vector<Tensor<T>> gradients(const Tensor<T>& loss, std::span<const Tensor<T>> wrt) {
  using NodeT = detail::Node<T>;
  if (loss.size() != 1) throw UsageError("backward: loss " + dims_str(loss.dims()) + " is not a scalar");

  std::vector<Tensor<T>> out;
  out.reserve(wrt.size());
  if (!loss.requires_grad()) {
    for (auto& w : wrt) out.push_back(Tensor<T>::zeros(w.dims()));
    return out;
  }

  // Iterative post-order DFS over nodes that require gradients.
  std::vector<const NodeT*> order;
  std::unordered_map<const NodeT*, bool> visited;
  std::vector<std::pair<const NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node_ptr().get(), 0);
  visited[loss.node_ptr().get()] = true;
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      const NodeT* p = n->parents[next++].get();
      if (p->requires_grad && !visited[p]) {
        visited[p] = true;
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  std::unordered_map<const NodeT*, std::vector<T>> grads;
  grads[loss.node_ptr().get()] = std::vector<T>{T(1)};
  std::vector<T*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodeT* n = *it;
    if (!n->backward) continue;
    auto g = grads.find(n);
    if (g == grads.end()) continue;
    slots.assign(n->parents.size(), nullptr);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      const NodeT* p = n->parents[i].get();
      if (!p->requires_grad) continue;
      auto& buf = grads[p];
      if (buf.empty()) buf.assign(p->value.size(), T(0));
      slots[i] = buf.data();
    }
    // grads may rehash while inserting parents; look the node up again.
    const auto& gout = grads.at(n);
    n->backward(std::span<const T>(gout), std::span<T* const>(slots));
  }

  for (auto& w : wrt) {
    auto g = grads.find(w.node_ptr().get());
    if (g == grads.end() || g->second.empty()) {
      out.push_back(Tensor<T>::zeros(w.dims()));
    } else {
      if (!detail::all_finite<T>(g->second)) throw NumericError("backward: non-finite gradient");
      out.push_back(Tensor<T>(w.dims(), g->second));
    }
  }
  return out;
}

/// d(loss)/d(p) for every parameter in `params`.
template <std::floating_point T>
GradMap<T> backward(const Tensor<T>& loss, const ParamSet<T>& params) {
  std::vector<Tensor<T>> wrt;
  wrt.reserve(params.size());
  for (auto& [_, t] : params) wrt.push_back(t);
  auto g = gradients<T>(loss, wrt);
  GradMap<T> out;
  std::size_t i = 0;
  for (auto& [name, _] : params) out.emplace(name, std::move(g[i++]));
  return out;
}

/// Coordinates to probe, per parameter name.
using CoordSelection = std::map<std::string, std::vector<std::size_t>>;

/// Every coordinate of every parameter.
template <std::floating_point T>
CoordSelection all_coordinates(const ParamSet<T>& params) {
  CoordSelection sel;
  for (auto& [name, t] : params) {
    auto& v = sel[name];
    v.resize(t.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  }
  return sel;
}

template <std::floating_point T>
struct SparseGrad {
  std::map<std::string, std::vector<std::pair<std::size_t, T>>> entries;
};

namespace detail {

template <class T, class F>
T eval_scalar(F& f, const ParamSet<T>& p) {
  auto r = f(p);
  T v;
  if constexpr (std::is_same_v<std::decay_t<decltype(r)>, Tensor<T>>) {
    v = r.item();
  } else {
    v = static_cast<T>(r);
  }
  if (!std::isfinite(v)) throw NumericError("finite_difference_oracle: non-finite function value");
  return v;
}

}  // namespace detail

/// Central-difference derivative estimates at selected coordinates.
///
/// `f` maps a ParamSet to a scalar (either T or a one-element Tensor). The
/// parameters handed to `f` never require gradients, so no graph is recorded.
template <std::floating_point T, class F>
SparseGrad<T> finite_difference_probe(F&& f, const ParamSet<T>& params, const CoordSelection& coords,
                                      T eps = T(1e-5)) {
  if (!(eps > T(0))) throw UsageError("finite_difference_oracle: eps must be positive");
  ParamSet<T> base = params.with_grad(false);
  SparseGrad<T> out;
  for (auto& [name, idx] : coords) {
    const Tensor<T>& t = base.at(name);
    std::vector<T> work = t.values();
    auto& dst = out.entries[name];
    dst.reserve(idx.size());
    for (std::size_t i : idx) {
      if (i >= work.size()) throw UsageError("finite_difference_oracle: coordinate out of range for " + name);
      const T x = work[i];
      const T xp = x + eps;
      const T xm = x - eps;
      ParamSet<T> probe = base;
      work[i] = xp;
      probe.set(name, Tensor<T>(t.dims(), work));
      const T fp = detail::eval_scalar(f, probe);
      work[i] = xm;
      probe.set(name, Tensor<T>(t.dims(), work));
      const T fm = detail::eval_scalar(f, probe);
      work[i] = x;
      dst.emplace_back(i, (fp - fm) / (xp - xm));
    }
  }
  return out;
}

/// Dense central-difference gradient over every coordinate of every parameter.
template <std::floating_point T, class F>
GradMap<T> finite_difference_oracle(F&& f, const ParamSet<T>& params, T eps = T(1e-5)) {
  auto sparse = finite_difference_probe<T>(f, params, all_coordinates(params), eps);
  GradMap<T> out;
  for (auto& [name, t] : params) {
    std::vector<T> g(t.size(), T(0));
    for (auto [i, v] : sparse.entries[name]) g[i] = v;
    out.emplace(name, Tensor<T>(t.dims(), std::move(g)));
  }
  return out;
}

}  // namespace tilefuse
