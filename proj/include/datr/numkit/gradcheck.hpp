#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "datr/numkit/tensor.hpp"

namespace datr::numkit {

// Central finite-difference oracle for reverse-mode gradients. `f` must be a
// deterministic scalar function that rebuilds its graph from the given leaf
// parameters on every call. Returns the worst relative error
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over all elements.
inline double grad_check(const std::function<Tensor<double>()>& f,
                         std::vector<Tensor<double>> params, double step = 1e-5) {
  for (auto& p : params) p.zero_grad();
  Tensor<double> loss = f();
  if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: non-finite loss");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (long j = 0; j < p.numel(); ++j) {
      const double saved = p.val()[j];
      double fplus, fminus;
      {
        NoGradGuard ng;
        p.val()[j] = saved + step;
        fplus = f().item();
        p.val()[j] = saved - step;
        fminus = f().item();
        p.val()[j] = saved;
      }
      if (!std::isfinite(fplus) || !std::isfinite(fminus))
        throw std::runtime_error("grad_check: non-finite perturbed loss");
      const double numeric = (fplus - fminus) / (2.0 * step);
      const double a = analytic[pi][j];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace datr::numkit
