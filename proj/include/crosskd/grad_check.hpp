#pragma once

#include <functional>
#include <string>
#include <vector>

#include "crosskd/tensor.hpp"

namespace crosskd {

struct GradCheckReport {
  std::string name;
  /// Max relative error per parameter, in the order given.
  std::vector<double> max_rel_error;
  double worst = 0.0;
  double tol = 0.0;
  bool passed = false;
};

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences, perturbing every element of every parameter by ±eps.
/// `f` must rebuild its graph from `params` on each call and be deterministic.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport grad_check(const std::string& name, const std::function<Tensor()>& f,
                           std::vector<Tensor> params, double eps = 1e-5, double tol = 1e-4);

}  // namespace crosskd
