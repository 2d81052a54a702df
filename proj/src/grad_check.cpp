#include "crosskd/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "crosskd/errors.hpp"

namespace crosskd {

GradCheckReport grad_check(const std::string& name, const std::function<Tensor()>& f,
                           std::vector<Tensor> params, double eps, double tol) {
  GradCheckReport report{name, {}, 0.0, tol, false};
  for (auto& p : params) {
    if (!p.requires_grad()) throw ConfigError("grad_check: parameter does not require grad");
    p.zero_grad();
  }
  Tensor out;
  try {
    out = f();
    out.backward();
  } catch (const NumericError& e) {
    throw NumericError(name + ": " + e.what());
  }

  for (auto& p : params) {
    std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                : std::vector<double>(p.size(), 0.0);
    auto data = p.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = f().item();
      data[i] = saved - eps;
      const double down = f().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      if (!std::isfinite(numeric)) throw NumericError(name + ": non-finite finite difference");
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    report.max_rel_error.push_back(worst);
    report.worst = std::max(report.worst, worst);
    p.zero_grad();
  }
  report.passed = report.worst < tol;
  return report;
}

}  // namespace crosskd
