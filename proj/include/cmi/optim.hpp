#pragma once

#include <vector>

#include "cmi/autograd.hpp"
#include "cmi/tensor.hpp"

namespace cmi {

// v <- momentum * v + grad; p <- p - lr * v
template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, T lr, T momentum) {
  require(lr >= T{0}, "sgd_step: learning rate must be >= 0");
  require(momentum >= T{0} && momentum < T{1}, "sgd_step: momentum must be in [0,1)");
  require(param.shape() == grad.shape(), "sgd_step: gradient shape " + shape_str(grad.shape()) +
                                             " does not match parameter " + shape_str(param.shape()));
  if (velocity.shape() != param.shape()) velocity = Tensor<T>(param.shape());
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    param[i] -= lr * velocity[i];
  }
}

// Momentum SGD over a fixed parameter list; owns one velocity buffer per parameter.
template <typename T>
class Sgd {
public:
  Sgd(std::vector<Var<T>> params, T lr, T momentum)
      : params_(std::move(params)), velocity_(params_.size()), lr_(lr), momentum_(momentum) {}

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i)
      sgd_step(params_[i].mutable_value(), params_[i].grad(), velocity_[i], lr_, momentum_);
  }

  T learning_rate() const { return lr_; }

private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> velocity_;
  T lr_;
  T momentum_;
};

}  // namespace cmi
