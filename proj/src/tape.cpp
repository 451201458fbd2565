#include "mivhead/tape.hpp"

#include <cstring>

#include "mivhead/error.hpp"

namespace mivhead {

const Tensor& Var::value() const { return tape->value(*this); }

const Tensor& BackwardContext::input(std::size_t k) const {
  return *tape_.nodes_[tape_.nodes_[node_].inputs.at(k)].value;
}

Tensor* BackwardContext::grad(std::size_t k) {
  const auto id = tape_.nodes_[node_].inputs.at(k);
  if (!tape_.nodes_[id].requires_grad) return nullptr;
  return tape_.grad_buffer(id);
}

Var Tape::constant(Tensor value) { return constant(std::make_shared<const Tensor>(std::move(value))); }

Var Tape::constant(std::shared_ptr<const Tensor> value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(Tensor value, std::string name) {
  if (!value.all_finite()) throw NumericError("parameter '" + name + "' is not finite");
  Node n;
  n.op = "parameter";
  n.value = std::make_shared<const Tensor>(std::move(value));
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  Var v{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  params_.push_back(v);
  param_names_.push_back(std::move(name));
  return v;
}

Var Tape::record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite output from op '") + op + "'");
  Node n;
  n.op = op;
  n.value = std::make_shared<const Tensor>(std::move(value));
  n.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape != this) throw Error(std::string("op '") + op + "' mixes tapes");
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor* Tape::grad_buffer(std::uint32_t id) {
  if (grads_[id].empty()) grads_[id] = Tensor(nodes_[id].value->shape(), 0.0);
  return &grads_[id];
}

void Tape::backward(Var output) {
  if (output.tape != this) throw Error("backward: foreign variable");
  if (value(output).size() != 1) {
    throw ShapeError("backward requires a single-element output, got " + shape_string(value(output).shape()));
  }
  grads_.assign(nodes_.size(), Tensor());
  visits_ = 0;
  if (!nodes_[output.id].requires_grad) return;
  grads_[output.id] = Tensor(value(output).shape(), 1.0);
  for (std::uint32_t id = output.id + 1; id-- > 0;) {
    auto& node = nodes_[id];
    if (!node.backward || grads_[id].empty()) continue;
    // The context refers to grads_[id]; input buffers are other slots, and
    // grads_ is sized up front so it never reallocates during the sweep.
    BackwardContext ctx(*this, id, grads_[id], *node.value);
    node.backward(ctx);
    ++visits_;
  }
}

std::vector<bool> Tape::sign_pattern(const char* op) const {
  std::vector<bool> out;
  for (const auto& n : nodes_) {
    if (std::strcmp(n.op, op) != 0 || n.inputs.empty()) continue;
    for (double x : nodes_[n.inputs[0]].value->vec()) out.push_back(x > 0.0);
  }
  return out;
}

Tensor Tape::grad(Var v) const {
  if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
  return Tensor(value(v).shape(), 0.0);
}

}  // namespace mivhead
