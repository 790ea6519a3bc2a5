#pragma once

// Shared helpers for the test suites. The finite-difference checker here is
// the independent oracle for gradient correctness: it only ever calls forward
// evaluation and never touches the backward implementation it validates.

#include <functional>
#include <string>
#include <vector>

#include "cmssl/graph.hpp"
#include "cmssl/rng.hpp"
#include "cmssl/tensor.hpp"

namespace testutil {

inline cmssl::Tensor random_tensor(cmssl::Shape shape, cmssl::Rng& rng, double lo = -1.0, double hi = 1.0) {
  cmssl::Tensor t(std::move(shape));
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

struct FdResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

// Central finite differences against analytic gradients. The caller populates
// param grads with one backward pass first; `loss_value` must evaluate the
// loss at the current parameter values with a fresh forward pass. Relative
// error uses denominator max(1, |analytic|).
inline FdResult fd_check(std::vector<std::pair<std::string, cmssl::Tensor*>> params,
                         const std::function<double()>& loss_value, double eps = 1e-6) {
  FdResult res;
  for (auto& [name, p] : params) {
    for (std::size_t i = 0; i < p->values.size(); ++i) {
      double saved = p->values[i];
      p->values[i] = saved + eps;
      double lp = loss_value();
      p->values[i] = saved - eps;
      double lm = loss_value();
      p->values[i] = saved;
      double fd = (lp - lm) / (2 * eps);
      double analytic = p->grad[i];
      double rel = std::abs(fd - analytic) / std::max(1.0, std::abs(analytic));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace testutil
