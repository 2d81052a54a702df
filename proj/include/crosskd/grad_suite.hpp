#pragma once

// Registry of finite-difference checks covering every differentiable op,
// the projector and discriminator losses, and the logit-distillation loss.

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "crosskd/grad_check.hpp"

namespace crosskd {

struct GradSuiteItem {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed, double tol)> run;
};

const std::vector<GradSuiteItem>& grad_suite();

struct GradSuiteResult {
  std::vector<GradCheckReport> reports;  // one per item and seed
  double worst = 0.0;
  bool passed = false;
  double seconds = 0.0;
};

/// Runs every item at every seed. With a log, prints one line per item and seed.
GradSuiteResult run_grad_suite(std::span<const std::uint64_t> seeds, double tol = 1e-4,
                               std::ostream* log = nullptr);

}  // namespace crosskd
