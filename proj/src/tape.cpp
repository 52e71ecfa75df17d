#include "smelab/tape.hpp"

#include "smelab/errors.hpp"

namespace smelab {

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::needs_grad() const { return tape_->needs_grad(id_); }

Var Tape::leaf(Tensor& t) {
  Node& node = nodes_.emplace_back();
  node.ref = &t;
  node.leaf_target = &t;
  node.needs_grad = recording_ && t.requires_grad();
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant_ref(const Tensor& t) {
  Node& node = nodes_.emplace_back();
  node.ref = &t;
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node& node = nodes_.emplace_back();
  node.owned = std::move(value);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop) {
  bool needs = false;
  if (recording_) {
    for (const Var& in : inputs) {
      if (&in.tape() != this) throw std::logic_error("op mixes variables from different tapes");
      needs = needs || nodes_[in.id()].needs_grad;
    }
  }
  Node& node = nodes_.emplace_back();
  node.owned = std::move(value);
  node.needs_grad = needs;
  if (needs) node.backprop = std::move(backprop);
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& node = nodes_[id];
  return node.ref ? *node.ref : node.owned;
}

std::vector<double>& Tape::grad(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad.assign(value(id).numel(), 0.0);
  return node.grad;
}

void Tape::backward(Var loss, bool flush_to_leaves) {
  if (&loss.tape() != this) throw std::logic_error("loss belongs to a different tape");
  if (backward_done_) {
    throw std::logic_error("backward() already ran on this tape; record a new tape");
  }
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
  }
  backward_done_ = true;
  visits_ = 0;
  if (!nodes_[loss.id()].needs_grad) return;
  grad(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.needs_grad || node.grad.empty()) continue;
    if (node.backprop) {
      node.backprop(*this, id);
      ++visits_;
    }
  }
  if (!flush_to_leaves) return;
  for (Node& node : nodes_) {
    if (!node.leaf_target || !node.needs_grad || node.grad.empty()) continue;
    auto dst = node.leaf_target->mutable_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += node.grad[i];
  }
}

std::vector<double> Tape::gradient(Var v) const {
  const Node& node = nodes_[v.id()];
  if (node.grad.empty()) return std::vector<double>(value(v.id()).numel(), 0.0);
  return node.grad;
}

}  // namespace smelab
