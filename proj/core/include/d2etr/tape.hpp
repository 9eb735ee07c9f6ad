// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "d2etr/tensor.hpp"

namespace d2etr::ad {

/// A named trainable tensor. The gradient buffer is owned here and only
/// written by Tape::accumulate_param_grads, so per-sample tapes can run
/// independently and merge afterwards.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

/// Ordered, name-unique collection of parameters with stable addresses.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(std::string name, Tensor init);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t total_values() const;
  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const noexcept { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  int dim(int axis) const { return value().dim(axis); }
  std::size_t numel() const { return value().numel(); }
};

/// Records primitive applications in execution order. Creation order is a
/// topological order, so backward simply walks the record in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that receives a gradient.
  Var variable(Tensor value);
  /// Leaf bound to a parameter; the tensor is read in place, not copied.
  /// Binding the same parameter twice returns the same node.
  Var param(Parameter& p);

  /// Appends the result of a primitive. The backward closure is kept only
  /// when some input needs a gradient. Throws NumericError on non-finite output.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(int id) const;
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  /// Gradient buffer to accumulate into, or nullptr if the node needs none.
  double* grad_sink(int id);
  /// Upstream gradient of a node during backward; nullptr if never reached.
  const double* grad_of(int id) const;

  /// Gradient of a node after backward (zeros if unreached).
  Tensor grad(Var v) const;

  void backward(Var loss);
  /// Adds `scale` times each bound parameter's gradient into Parameter::grad.
  void accumulate_param_grads(double scale = 1.0) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t backward_visits() const noexcept { return backward_visits_; }

 private:
  struct Node {
    const char* op = "";
    Tensor owned;
    const Tensor* external = nullptr;
    AlignedVector grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  std::size_t backward_visits_ = 0;
};

}  // namespace d2etr::ad
