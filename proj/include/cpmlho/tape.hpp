#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "cpmlho/tensor.hpp"

namespace cpmlho::ad {

using NodeId = std::size_t;
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  NodeId id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Given dL/d(output), accumulates dL/d(input_i) into input_grads[i]. Slots for
/// inputs that do not need a gradient are null.
using BackwardFn = std::function<void(const Tensor& upstream, std::span<Tensor* const> input_grads)>;

enum class NodeKind { Leaf, Constant, Op };

struct Node {
  std::string op;
  NodeKind kind = NodeKind::Op;
  std::vector<NodeId> inputs;
  Tensor value;
  BackwardFn backward;
  bool requires_grad = false;
};

/// Append-only record of one forward computation. Inputs of a node always
/// precede it, so reverse index order is a valid topological order.
///
/// A tape is built fresh for every training step and confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value, std::string name = "leaf");
  /// Non-differentiable input (data, sampled noise, frozen parameters).
  Var constant(Tensor value, std::string name = "constant");
  Var record(std::string op, std::span<const Var> inputs, Tensor value, BackwardFn backward);
  Var record(std::string op, std::initializer_list<Var> inputs, Tensor value, BackwardFn backward) {
    return record(std::move(op), std::span<const Var>(inputs.begin(), inputs.size()), std::move(value),
                  std::move(backward));
  }

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::vector<NodeId> leaf_ids() const;

 private:
  std::vector<Node> nodes_;
};

/// Per-leaf gradients produced by one backward pass.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::pair<NodeId, Tensor>> entries) : entries_(std::move(entries)) {}

  const Tensor& operator[](Var v) const { return at(v.id()); }
  const Tensor& at(NodeId id) const;
  const std::vector<std::pair<NodeId, Tensor>>& entries() const noexcept { return entries_; }

 private:
  std::vector<std::pair<NodeId, Tensor>> entries_;
};

/// Reverse-mode sweep from a scalar loss. Every leaf receives a gradient;
/// leaves with no path to the loss get zeros of their own shape.
Gradients backward(const Tape& tape, Var loss);

}  // namespace cpmlho::ad
