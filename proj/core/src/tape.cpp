// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/tape.hpp"

#include <algorithm>
#include <cmath>

namespace d2etr::ad {

Parameter& ParameterStore::add(std::string name, Tensor init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  index_.emplace(name, params_.size());
  Parameter& p = params_.emplace_back();
  p.name = std::move(name);
  p.value = std::move(init);
  p.zero_grad();
  return p;
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter& ParameterStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (p == nullptr) throw ConfigError("unknown parameter: " + name);
  return *p;
}

std::size_t ParameterStore::total_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.op = "variable";
  n.owned = std::move(value);
  n.needs_grad = true;
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var{this, it->second};
  Node n;
  n.op = "param";
  n.external = &p.value;
  n.needs_grad = true;
  n.param = &p;
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.id);
  return v;
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(const char* op, Tensor value, const std::vector<Var>& inputs,
                 BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op);
  }
  Node n;
  n.op = op;
  n.owned = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape != this) throw std::logic_error(std::string(op) + ": input from another tape");
    n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_.at(id);
  return n.external ? *n.external : n.owned;
}

double* Tape::grad_sink(int id) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return nullptr;
  if (n.grad.empty()) n.grad.assign(value(id).numel(), 0.0);
  return n.grad.data();
}

const double* Tape::grad_of(int id) const {
  const Node& n = nodes_[id];
  return n.grad.empty() ? nullptr : n.grad.data();
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor(value(v.id).shape(), 0.0);
  Tensor out(value(v.id).shape());
  std::copy(n.grad.begin(), n.grad.end(), out.ptr());
  return out;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::logic_error("backward: loss from another tape");
  if (value(loss.id).numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + to_string(value(loss.id).shape()));
  }
  if (!nodes_[loss.id].needs_grad) return;
  grad_sink(loss.id)[0] += 1.0;
  backward_visits_ = 0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    ++backward_visits_;
    n.backward(*this, id);
  }
  for (const Node& n : nodes_) {
    for (double g : n.grad) {
      if (!std::isfinite(g)) throw NumericError(std::string("non-finite gradient at ") + n.op);
    }
  }
}

void Tape::accumulate_param_grads(double scale) const {
  for (const Node& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    auto dst = n.param->grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * n.grad[i];
  }
}

}  // namespace d2etr::ad
