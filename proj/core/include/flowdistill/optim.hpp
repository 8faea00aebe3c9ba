#pragma once

#include <cmath>
#include <vector>

#include "flowdistill/tensor.hpp"

namespace flowdistill {

// Adam with per-parameter first/second moment estimates and bias correction.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, T lr, T beta1 = T(0.5),
       T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].size(), T(0));
      v_[i].assign(params_[i].size(), T(0));
    }
  }

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }
  long step_count() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, T(t_));
    const T bc2 = T(1) - std::pow(beta2_, T(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;  // untouched by the last backward
      auto data = params_[i].data();
      auto grad = params_[i].grad();
      T* m = m_[i].data();
      T* v = v_[i].data();
      for (std::size_t j = 0; j < data.size(); ++j) {
        const T g = grad[j];
        m[j] = beta1_ * m[j] + (T(1) - beta1_) * g;
        v[j] = beta2_ * v[j] + (T(1) - beta2_) * g * g;
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  T lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

// Linear decay to zero over the second half of training: full rate through
// epoch floor(total/2), then a straight line down to zero at the end.
template <typename T>
T decayed_lr(T base_lr, int epoch, int total_epochs) {
  const int keep = total_epochs / 2;
  if (epoch < keep) return base_lr;
  const int decay_span = total_epochs - keep;
  if (decay_span <= 0) return base_lr;
  const T frac = T(total_epochs - epoch) / T(decay_span);
  return base_lr * std::max(T(0), frac);
}

}  // namespace flowdistill
