#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "stt/nn/tensor.hpp"

namespace stt::nn {

template <class T>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; only valid while the
// owning tape is alive.
template <class T>
class Var {
public:
  Var() = default;
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }

private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records forward operations in execution order and replays their gradient
// rules in exact reverse order. Gradients accumulate additively into node
// gradients and, at the end of backward(), into Parameter::grad.
template <class T>
class Tape {
public:
  // Receives the id of the op's output node.
  using BackwardFn = std::function<void(std::size_t)>;

  explicit Tape(bool record = true) : recording_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }
  Var<T> parameter(Parameter<T>& p) { return push(p.value, true, &p); }

  // Adds an op result. `backward` is kept only when recording and at least
  // one input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
  }
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_[v.id()].requires_grad;
    Var<T> out = push(std::move(value), needs && recording_, nullptr);
    if (needs && recording_) ops_.push_back(Op{out.id(), std::move(backward)});
    return out;
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  // Gradient buffer for a node, zero-allocated on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse.
  // Node gradients are reset first, so calling backward twice adds the
  // parameter gradients twice.
  void backward(Var<T> loss);

private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };
  struct Op {
    std::size_t output;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Parameter<T>* param) {
    nodes_.push_back(Node{std::move(value), {}, param, requires_grad});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<Op> ops_;
  bool recording_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <class T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor<T>();
  grad(loss.id()).fill(T{1});
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    if (has_grad(it->output)) it->backward(it->output);
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
    auto dst = n.param->grad.data();
    auto src = n.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

}  // namespace stt::nn
