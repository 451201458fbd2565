#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mivhead/tensor.hpp"

namespace mivhead {

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// What a backward rule sees: the upstream gradient, the forward values, and
// one accumulation buffer per input (null when that input needs no gradient).
class BackwardContext {
 public:
  const Tensor& out_grad;
  const Tensor& out_value;

  const Tensor& input(std::size_t k) const;
  // Accumulation buffer for input k, already shaped and zero-initialised on
  // first use, or nullptr.
  Tensor* grad(std::size_t k);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::uint32_t node, const Tensor& g, const Tensor& v)
      : out_grad(g), out_value(v), tape_(tape), node_(node) {}
  Tape& tape_;
  std::uint32_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

// Append-only reverse-mode differentiation graph. Nodes are recorded in
// topological order by construction; backward() walks them once in reverse.
// Single owner: a tape is never shared between threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var constant(std::shared_ptr<const Tensor> value);
  Var parameter(Tensor value, std::string name);

  // Records an operation result. `backward` is dropped when no input needs a
  // gradient. Throws NumericError if `value` is not finite.
  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return *nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Reverse sweep from a single-element output. Gradients of leaves the sweep
  // never reaches stay exactly zero.
  void backward(Var output);

  // Gradient of `v` after backward(): a zero tensor when nothing flowed.
  Tensor grad(Var v) const;

  const std::vector<Var>& parameters() const { return params_; }
  const std::string& parameter_name(std::size_t k) const { return param_names_.at(k); }

  std::size_t size() const { return nodes_.size(); }
  // Sign bits of the first input of every `op` node, in recording order.
  // Two evaluations with different patterns lie on different sides of a kink.
  std::vector<bool> sign_pattern(const char* op) const;
  // Number of nodes whose backward rule ran during the last backward().
  std::size_t backward_visits() const { return visits_; }

 private:
  friend class BackwardContext;
  struct Node {
    const char* op = "";
    std::shared_ptr<const Tensor> value;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  Tensor* grad_buffer(std::uint32_t id);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<Var> params_;
  std::vector<std::string> param_names_;
  std::size_t visits_ = 0;
};

}  // namespace mivhead
