#pragma once

#include <vector>

#include "stt/nn/tensor.hpp"

namespace stt::nn {

// SGD with heavy-ball momentum: v = mu * v + g (+ wd * p); p -= lr * v.
// Frozen parameters keep their gradients but are never updated.
template <class T>
class Sgd {
public:
  explicit Sgd(std::vector<Parameter<T>*> params, T momentum = T(0.9), T weight_decay = T(0))
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (auto* p : params_) velocity_.emplace_back(p->value.shape());
  }

  void step(T lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<T>& p = *params_[i];
      if (p.frozen) continue;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      T* v = velocity_[i].raw();
      T* w = p.value.raw();
      const T* g = p.grad.raw();
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j] + weight_decay_ * w[j];
        w[j] -= lr * v[j];
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  const std::vector<Parameter<T>*>& parameters() const noexcept { return params_; }

private:
  std::vector<Parameter<T>*> params_;
  std::vector<Tensor<T>> velocity_;
  T momentum_;
  T weight_decay_;
};

}  // namespace stt::nn
