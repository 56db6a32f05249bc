#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmac/tensor.hpp"

namespace cmac {

// A trainable tensor with its accumulated gradient. `group` names the
// sub-network the parameter belongs to (used by gradient checking).
struct Parameter {
  std::string name;
  std::string group;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, std::string g, Tensor v)
      : name(std::move(n)), group(std::move(g)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order so
// ids are topologically sorted; backward walks them once in reverse.
class Tape {
 public:
  // Receives the gradient of this node's output and the output value itself.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad, const Tensor& out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // One leaf per parameter per tape; repeated calls return the same node.
  Var param(Parameter& p);

  // Appends an op node. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  bool grad_enabled() const { return grad_enabled_; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node, allocated on first use.
  Tensor& grad_buffer(std::size_t id);
  // Adds `g` into the node's gradient when the node needs one.
  void accumulate(std::size_t id, const Tensor& g);

  // Throws ContractError unless `loss` holds exactly one value.
  void backward(Var loss);
  // Gradient of the last backward() w.r.t. `v`; zeros when unreached.
  Tensor gradient(Var v) const;
  // Adds leaf gradients into Parameter::grad for every parameter on the tape.
  void accumulate_param_grads();

  // Hash of the branch decisions (relu signs, pooling argmaxes, loss pieces)
  // taken during forward. Two evaluations with equal signatures lie in the
  // same smooth region of the function.
  std::uint64_t branch_signature() const { return signature_; }
  void mix_signature(std::uint64_t v) {
    signature_ ^= v + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  std::uint64_t signature_ = 0;
};

// Test-only hook: parameters of this group receive 1.5x their true gradient
// in accumulate_param_grads. Empty outside fault-injection tests.
namespace fault {
inline std::string corrupt_param_group;
}

}  // namespace cmac
