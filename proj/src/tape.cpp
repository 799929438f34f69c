#include "cpmlho/tape.hpp"

#include <algorithm>

#include "cpmlho/errors.hpp"

namespace cpmlho::ad {

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->node(id_).value;
}

bool Var::requires_grad() const { return tape_ && tape_->node(id_).requires_grad; }

Var Tape::leaf(Tensor value, std::string name) {
  Node n;
  n.op = std::move(name);
  n.kind = NodeKind::Leaf;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value, std::string name) {
  Node n;
  n.op = std::move(name);
  n.kind = NodeKind::Constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string op, std::span<const Var> inputs, Tensor value, BackwardFn backward) {
  Node n;
  n.op = std::move(op);
  n.kind = NodeKind::Op;
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.tape() != this) throw ContractError("op '" + n.op + "' mixes nodes from different tapes");
    n.inputs.push_back(in.id());
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

std::vector<NodeId> Tape::leaf_ids() const {
  std::vector<NodeId> ids;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind == NodeKind::Leaf) ids.push_back(i);
  }
  return ids;
}

const Tensor& Gradients::at(NodeId id) const {
  auto it = std::find_if(entries_.begin(), entries_.end(), [id](const auto& e) { return e.first == id; });
  if (it == entries_.end()) throw ContractError("no gradient recorded for node " + std::to_string(id));
  return it->second;
}

Gradients backward(const Tape& tape, Var loss) {
  if (loss.tape() != &tape) throw ContractError("loss node belongs to another tape");
  const Tensor& lv = loss.value();
  if (lv.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_to_string(lv.shape()));
  }

  std::vector<Tensor> grads(loss.id() + 1);
  grads[loss.id()] = Tensor(lv.shape(), 1.0);

  std::vector<Tensor*> slots;
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    const Node& n = tape.node(id);
    if (n.kind != NodeKind::Op || !n.requires_grad || grads[id].empty()) continue;
    slots.assign(n.inputs.size(), nullptr);
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      const NodeId in = n.inputs[i];
      if (!tape.node(in).requires_grad) continue;
      if (grads[in].empty()) grads[in] = Tensor::zeros_like(tape.node(in).value);
      slots[i] = &grads[in];
    }
    n.backward(grads[id], slots);
    grads[id] = Tensor();
  }

  std::vector<std::pair<NodeId, Tensor>> out;
  for (NodeId id : tape.leaf_ids()) {
    if (id < grads.size() && !grads[id].empty()) {
      out.emplace_back(id, std::move(grads[id]));
    } else {
      out.emplace_back(id, Tensor::zeros_like(tape.node(id).value));
    }
  }
  return Gradients(std::move(out));
}

}  // namespace cpmlho::ad
