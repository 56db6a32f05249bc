#include "cmac/tape.hpp"

namespace cmac {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var{this, it->second};
  Node n;
  n.value = p.value;
  n.requires_grad = grad_enabled_;
  n.param = &p;
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (std::size_t id : inputs) {
      if (nodes_[id].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& buf = grad_buffer(id);
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss belongs to a different tape");
  if (value(loss.id).numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(value(loss.id).shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad_buffer(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    // The closure may allocate gradients of earlier nodes; deque keeps n valid.
    n.backward(*this, n.grad, n.value);
  }
}

Tensor Tape::gradient(Var v) const {
  const Node& n = nodes_[v.id];
  if (!n.has_grad) return Tensor(n.value.shape());
  return n.grad;
}

void Tape::accumulate_param_grads() {
  for (const auto& [param, id] : param_nodes_) {
    const Node& n = nodes_[id];
    if (!n.has_grad) continue;
    Parameter* p = n.param;
    if (p->grad.shape() != p->value.shape()) p->grad = Tensor(p->value.shape());
    auto dst = p->grad.data();
    auto src = n.grad.data();
    const double k = !fault::corrupt_param_group.empty() && p->group == fault::corrupt_param_group ? 1.5 : 1.0;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += k * src[i];
  }
}

}  // namespace cmac
