#pragma once

#include <vector>

#include "sclr/tensor.hpp"

namespace sclr {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

// Bias-corrected Adam over an ordered parameter list. Moment buffers are
// bound to parameter shapes at construction; the step counter only moves
// forward.
template <typename S>
class AdamState {
 public:
  AdamState(const std::vector<Tensor<S>>& params, AdamConfig cfg)
      : cfg_(cfg), step_(0) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), S(0));
      v_.emplace_back(p.size(), S(0));
    }
  }

  long step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  void step(std::vector<Tensor<S>>& params) {
    require(params.size() == m_.size(), "adam_step: parameter count changed");
    ++step_;
    const S lr = S(cfg_.lr);
    const S b1 = S(cfg_.beta1);
    const S b2 = S(cfg_.beta2);
    const S eps = S(cfg_.eps);
    const S c1 = S(1) / S(1 - std::pow(cfg_.beta1, double(step_)));
    const S c2 = S(1) / S(1 - std::pow(cfg_.beta2, double(step_)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      require(p.size() == long(m_[i].size()), "adam_step: shape mismatch");
      const std::vector<S>& g = p.grad();
      S* w = p.data();
      S* m = m_[i].data();
      S* v = v_[i].data();
      for (long j = 0; j < p.size(); ++j) {
        m[j] = b1 * m[j] + (S(1) - b1) * g[std::size_t(j)];
        v[j] = b2 * v[j] + (S(1) - b2) * g[std::size_t(j)] * g[std::size_t(j)];
        w[j] -= lr * (m[j] * c1) / (std::sqrt(v[j] * c2) + eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  long step_;
  std::vector<std::vector<S>> m_, v_;
};

template <typename S>
void adam_step(std::vector<Tensor<S>>& params, AdamState<S>& state) {
  state.step(params);
}

template <typename S>
void zero_grads(std::vector<Tensor<S>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace sclr
