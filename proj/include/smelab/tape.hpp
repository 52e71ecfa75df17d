#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

#include "smelab/tensor.hpp"

namespace smelab {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid for the
// lifetime of its tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  double item() const { return value().item(); }
  bool needs_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class GradMode { kEnabled, kDisabled };

// Ordered record of primitive operations.
//
// Values are computed eagerly when an op is recorded. A node keeps a
// backward closure only when gradient recording is enabled and at least one
// of its inputs needs a gradient, so a disabled tape runs the same kernels
// with no backward bookkeeping. backward() is one-shot per tape.
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(GradMode mode = GradMode::kEnabled) : recording_(mode == GradMode::kEnabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // References `t` without copying. Gradients flow into t's grad buffer when
  // t.requires_grad() is set and the tape is recording. `t` must outlive the
  // tape.
  Var leaf(Tensor& t);
  // Read-only reference, never receives gradient.
  Var constant_ref(const Tensor& t);
  Var constant(Tensor value);

  // Reverse sweep from a scalar loss. Accumulates into leaf tensors' grad
  // buffers unless `flush_to_leaves` is false, in which case gradients are
  // only available through gradient().
  void backward(Var loss, bool flush_to_leaves = true);
  bool backward_done() const { return backward_done_; }
  std::size_t last_backward_visits() const { return visits_; }

  // Gradient of the last backward() loss w.r.t. v (zeros if v did not
  // influence the loss).
  std::vector<double> gradient(Var v) const;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // Op construction API.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop);
  const Tensor& value(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  // Upstream gradient of node `id`, allocated as zeros on first access.
  std::vector<double>& grad(std::size_t id);

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor* leaf_target = nullptr;
    bool needs_grad = false;
    Backprop backprop;
    std::vector<double> grad;
  };

  std::deque<Node> nodes_;
  bool recording_ = true;
  bool backward_done_ = false;
  std::size_t visits_ = 0;
};

}  // namespace smelab
