#pragma once

// Central finite-difference check of reverse-mode gradients. Meant to run at
// f64: the step 1e-4 * max(1, |theta|) balances truncation against rounding
// there. The callable must rebuild the loss graph from the current parameter
// values on every invocation and be deterministic.

#include <functional>
#include <string>
#include <vector>

#include "sclr/tensor.hpp"

namespace sclr {

template <typename S>
struct GradCheckBlock {
  std::string name;
  double max_rel_err = 0;
  long worst_index = -1;
};

template <typename S>
struct GradCheckReport {
  std::vector<GradCheckBlock<S>> blocks;
  double max_rel_err = 0;

  bool passed(double tolerance) const { return max_rel_err < tolerance; }
};

template <typename S>
GradCheckReport<S> grad_check(const std::function<Tensor<S>()>& f,
                              std::vector<Tensor<S>> params,
                              std::vector<std::string> names = {}) {
  for (auto& p : params) p.zero_grad();
  Tensor<S> loss = f();
  loss.backward();

  std::vector<std::vector<S>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  GradCheckReport<S> report;
  for (std::size_t b = 0; b < params.size(); ++b) {
    GradCheckBlock<S> block;
    block.name = b < names.size() ? names[b] : "param" + std::to_string(b);
    auto& p = params[b];
    for (long j = 0; j < p.size(); ++j) {
      const S theta = p.data()[j];
      const S h = S(1e-4) * std::max(S(1), S(std::abs(double(theta))));
      p.data()[j] = theta + h;
      const double up = double(f().item());
      p.data()[j] = theta - h;
      const double down = double(f().item());
      p.data()[j] = theta;
      const double fd = (up - down) / (2.0 * double(h));
      const double ad = double(analytic[b][std::size_t(j)]);
      const double rel = std::abs(ad - fd) /
                         std::max({1.0, std::abs(ad), std::abs(fd)});
      if (rel > block.max_rel_err) {
        block.max_rel_err = rel;
        block.worst_index = j;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, block.max_rel_err);
    report.blocks.push_back(std::move(block));
  }
  return report;
}

}  // namespace sclr
