#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "urec/error.hpp"
#include "urec/tensor.hpp"

namespace urec {

template <typename T>
struct AdamOptions {
  T learning_rate = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
};

// Adaptive-moment optimizer with bias correction. Holds first/second moment
// slots for exactly the trainable tensors it was constructed with; anything
// else is untouched by step().
template <typename T>
class Adam {
public:
  Adam(std::vector<Tensor<T>> params, AdamOptions<T> opts = {})
      : params_(std::move(params)), opts_(opts) {
    if (opts_.learning_rate <= T(0))
      raise(ErrorKind::config, "Adam: learning rate must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      if (!p.requires_grad())
        raise(ErrorKind::contract, "Adam: parameter does not require gradients");
      m_.emplace_back(p.size(), T(0));
      v_.emplace_back(p.size(), T(0));
    }
  }

  uint64_t step_count() const { return step_; }
  const AdamOptions<T>& options() const { return opts_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++step_;
    const double b1 = opts_.beta1, b2 = opts_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi];
      if (!p.grad_ready())
        raise(ErrorKind::contract, "Adam: missing gradient on trainable parameter (index " +
                                       std::to_string(pi) + ")");
      const auto& g = p.grad();
      auto& data = p.data();
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (size_t i = 0; i < data.size(); ++i) {
        const double gi = g[i];
        m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * gi);
        v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * gi * gi);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        data[i] -= static_cast<T>(static_cast<double>(opts_.learning_rate) * mhat /
                                  (std::sqrt(vhat) + static_cast<double>(opts_.epsilon)));
      }
    }
  }

private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  AdamOptions<T> opts_;
  uint64_t step_ = 0;
};

}  // namespace urec
