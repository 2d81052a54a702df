#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "crosskd/errors.hpp"
#include "crosskd/rng.hpp"
#include "crosskd/tensor.hpp"
#include "tensor_impl.hpp"

namespace crosskd {

using detail::make_result;
using detail::Node;
using detail::sink;
using detail::vals;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap cmap(const double* p, std::size_t r, std::size_t c) {
  return ConstMatMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MatMap mmap(double* p, std::size_t r, std::size_t c) {
  return MatMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

// b broadcasts over a when b's shape is a suffix of a's shape.
void require_suffix(const char* op, const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    shape_error(op, sa, sb);
  }
}

Tensor wrap(std::shared_ptr<Node> node, std::function<void(Node&)> backward) {
  if (node->requires_grad) node->backward = std::move(backward);
  return Tensor(std::move(node));
}

template <class F, class G>
Tensor unary(const Tensor& a, const char* op, F forward, G derivative) {
  const auto& x = vals(a);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = forward(x[i]);
  auto node = make_result(a.shape(), std::move(out), op, {&a});
  return wrap(node, [a, derivative](Node& self) {
    auto* ga = sink(a);
    const auto& x = vals(a);
    const auto& y = *self.storage;
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * derivative(x[i], y[i]);
  });
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// --- element-wise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_suffix("add", a, b);
  const auto& x = vals(a);
  const auto& y = vals(b);
  const std::size_t nb = y.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i % nb];
  return wrap(make_result(a.shape(), std::move(out), "add", {&a, &b}), [a, b](Node& self) {
    if (auto* ga = sink(a)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
    if (auto* gb = sink(b)) {
      const std::size_t nb = gb->size();
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % nb] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_suffix("sub", a, b);
  const auto& x = vals(a);
  const auto& y = vals(b);
  const std::size_t nb = y.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i % nb];
  return wrap(make_result(a.shape(), std::move(out), "sub", {&a, &b}), [a, b](Node& self) {
    if (auto* ga = sink(a)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
    if (auto* gb = sink(b)) {
      const std::size_t nb = gb->size();
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % nb] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  const auto& x = vals(a);
  const auto& y = vals(b);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return wrap(make_result(a.shape(), std::move(out), "mul", {&a, &b}), [a, b](Node& self) {
    const auto& x = vals(a);
    const auto& y = vals(b);
    if (auto* ga = sink(a)) {
      for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * y[i];
    }
    if (auto* gb = sink(b)) {
      for (std::size_t i = 0; i < x.size(); ++i) (*gb)[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      a, "leaky_relu", [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Tensor gelu(const Tensor& a) {
  // Exact (erf) form.
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [inv_sqrt_2pi](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

Tensor sigmoid(const Tensor& a) {
  // Clamped so that log(s) and log(1 - s) stay finite downstream.
  static const double lo = std::numeric_limits<double>::min();
  static const double hi = std::nextafter(1.0, 0.0);
  return unary(
      a, "sigmoid",
      [](double x) {
        const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        return std::clamp(s, lo, hi);
      },
      [](double, double s) { return s * (1.0 - s); });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_clamped(const Tensor& a, double floor) {
  for (double x : vals(a)) {
    if (x <= 0.0 && floor <= 0.0) throw NumericError("log of non-positive value");
  }
  return unary(
      a, "log", [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Tensor where(std::span<const std::uint8_t> mask, const Tensor& when_true, const Tensor& when_false) {
  require_same("where", when_true, when_false);
  if (mask.size() != when_true.size()) {
    throw DimensionError("where: mask has " + std::to_string(mask.size()) + " entries for " +
                         shape_str(when_true.shape()));
  }
  const auto& t = vals(when_true);
  const auto& f = vals(when_false);
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = mask[i] ? t[i] : f[i];
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return wrap(make_result(when_true.shape(), std::move(out), "where", {&when_true, &when_false}),
              [when_true, when_false, m = std::move(m)](Node& self) {
                if (auto* gt = sink(when_true)) {
                  for (std::size_t i = 0; i < m.size(); ++i) {
                    if (m[i]) (*gt)[i] += self.grad[i];
                  }
                }
                if (auto* gf = sink(when_false)) {
                  for (std::size_t i = 0; i < m.size(); ++i) {
                    if (!m[i]) (*gf)[i] += self.grad[i];
                  }
                }
              });
}

Tensor dropout(const Tensor& x, double rate, bool train, RngStream& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!train || rate == 0.0) return x;
  const double keep = 1.0 - rate;
  const auto& v = vals(x);
  std::vector<double> mask(v.size());
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    out[i] = v[i] * mask[i];
  }
  return wrap(make_result(x.shape(), std::move(out), "dropout", {&x}),
              [x, mask = std::move(mask)](Node& self) {
                auto* gx = sink(x);
                for (std::size_t i = 0; i < mask.size(); ++i) (*gx)[i] += self.grad[i] * mask[i];
              });
}

// --- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : vals(a)) s += v;
  return wrap(make_result({1}, {s}, "sum", {&a}), [a](Node& self) {
    auto* ga = sink(a);
    for (auto& g : *ga) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const auto sp = split_at(a.shape(), axis);
  const auto& x = vals(a);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t l = 0; l < sp.len; ++l) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        out[o * sp.inner + i] += x[(o * sp.len + l) * sp.inner + i];
      }
    }
  }
  for (auto& v : out) v /= static_cast<double>(sp.len);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  return wrap(make_result(shape, std::move(out), "mean_axis", {&a}), [a, sp](Node& self) {
    auto* ga = sink(a);
    const double w = 1.0 / static_cast<double>(sp.len);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t l = 0; l < sp.len; ++l) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          (*ga)[(o * sp.len + l) * sp.inner + i] += w * self.grad[o * sp.inner + i];
        }
      }
    }
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same("mse", a, b);
  const auto& x = vals(a);
  const auto& y = vals(b);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  const double n = static_cast<double>(x.size());
  return wrap(make_result({1}, {s / n}, "mse", {&a, &b}), [a, b, n](Node& self) {
    const auto& x = vals(a);
    const auto& y = vals(b);
    const double g = 2.0 * self.grad[0] / n;
    auto* ga = sink(a);
    auto* gb = sink(b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = g * (x[i] - y[i]);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

// --- softmax family ---------------------------------------------------------

Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto sp = split_at(a.shape(), axis);
  const auto& x = vals(a);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, x[base + l * sp.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const double e = std::exp(x[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= z;
    }
  }
  return wrap(make_result(a.shape(), std::move(out), "softmax", {&a}), [a, sp](Node& self) {
    auto* ga = sink(a);
    const auto& y = *self.storage;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) {
          dot += self.grad[base + l * sp.inner] * y[base + l * sp.inner];
        }
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t k = base + l * sp.inner;
          (*ga)[k] += y[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const auto sp = split_at(a.shape(), axis);
  const auto& x = vals(a);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, x[base + l * sp.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += std::exp(x[base + l * sp.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t l = 0; l < sp.len; ++l) {
        out[base + l * sp.inner] = x[base + l * sp.inner] - lse;
      }
    }
  }
  return wrap(make_result(a.shape(), std::move(out), "log_softmax", {&a}), [a, sp](Node& self) {
    auto* ga = sink(a);
    const auto& y = *self.storage;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        double gs = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) gs += self.grad[base + l * sp.inner];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t k = base + l * sp.inner;
          (*ga)[k] += self.grad[k] - std::exp(y[k]) * gs;
        }
      }
    }
  });
}

Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> labels) {
  if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DimensionError("cross_entropy: label " + std::to_string(y) + " out of range");
    }
  }
  const auto& x = vals(logits);
  std::vector<double> probs(x.size());
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = x.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - lse);
    loss -= row[labels[b]] - lse;
  }
  loss /= static_cast<double>(batch);
  std::vector<int> y(labels.begin(), labels.end());
  return wrap(make_result({1}, {loss}, "cross_entropy", {&logits}),
              [logits, probs = std::move(probs), y = std::move(y), batch, classes](Node& self) {
                auto* g = sink(logits);
                const double w = self.grad[0] / static_cast<double>(batch);
                for (std::size_t b = 0; b < batch; ++b) {
                  for (std::size_t c = 0; c < classes; ++c) {
                    const double onehot = static_cast<int>(c) == y[b] ? 1.0 : 0.0;
                    (*g)[b * classes + c] += w * (probs[b * classes + c] - onehot);
                  }
                }
              });
}

// --- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  mmap(out.data(), m, n).noalias() = cmap(vals(a).data(), m, k) * cmap(vals(b).data(), k, n);
  return wrap(make_result({m, n}, std::move(out), "matmul", {&a, &b}), [a, b, m, k, n](Node& self) {
    const auto g = cmap(self.grad.data(), m, n);
    if (auto* ga = sink(a)) mmap(ga->data(), m, k).noalias() += g * cmap(vals(b).data(), k, n).transpose();
    if (auto* gb = sink(b)) mmap(gb->data(), k, n).noalias() += cmap(vals(a).data(), m, k).transpose() * g;
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    shape_error("bmm", a.shape(), b.shape());
  }
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(B * m * n);
  for (std::size_t i = 0; i < B; ++i) {
    mmap(out.data() + i * m * n, m, n).noalias() =
        cmap(vals(a).data() + i * m * k, m, k) * cmap(vals(b).data() + i * k * n, k, n);
  }
  return wrap(make_result({B, m, n}, std::move(out), "bmm", {&a, &b}), [a, b, B, m, k, n](Node& self) {
    auto* ga = sink(a);
    auto* gb = sink(b);
    for (std::size_t i = 0; i < B; ++i) {
      const auto g = cmap(self.grad.data() + i * m * n, m, n);
      if (ga) {
        mmap(ga->data() + i * m * k, m, k).noalias() +=
            g * cmap(vals(b).data() + i * k * n, k, n).transpose();
      }
      if (gb) {
        mmap(gb->data() + i * k * n, k, n).noalias() +=
            cmap(vals(a).data() + i * m * k, m, k).transpose() * g;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.ndim() != 2 || x.shape().back() != w.dim(0)) shape_error("linear", x.shape(), w.shape());
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != w.dim(1))) {
    shape_error("linear(bias)", w.shape(), bias.shape());
  }
  const std::size_t in = w.dim(0), outd = w.dim(1), rows = x.size() / in;
  std::vector<double> out(rows * outd);
  auto y = mmap(out.data(), rows, outd);
  y.noalias() = cmap(vals(x).data(), rows, in) * cmap(vals(w).data(), in, outd);
  if (bias.defined()) {
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(vals(bias).data(), static_cast<Eigen::Index>(outd));
  }
  Shape shape = x.shape();
  shape.back() = outd;
  return wrap(make_result(shape, std::move(out), "linear", {&x, &w, &bias}),
              [x, w, bias, rows, in, outd](Node& self) {
                const auto g = cmap(self.grad.data(), rows, outd);
                if (auto* gx = sink(x)) {
                  mmap(gx->data(), rows, in).noalias() += g * cmap(vals(w).data(), in, outd).transpose();
                }
                if (auto* gw = sink(w)) {
                  mmap(gw->data(), in, outd).noalias() += cmap(vals(x).data(), rows, in).transpose() * g;
                }
                if (auto* gb = sink(bias)) {
                  Eigen::Map<Eigen::RowVectorXd>(gb->data(), static_cast<Eigen::Index>(outd)) +=
                      g.colwise().sum();
                }
              });
}

Tensor grouped_linear(const Tensor& x, const Tensor& w, const Tensor& bias,
                      std::span<const std::size_t> group_of_cell) {
  if (x.ndim() != 3 || w.ndim() != 3 || x.dim(2) != w.dim(1) || x.dim(1) != group_of_cell.size()) {
    shape_error("grouped_linear", x.shape(), w.shape());
  }
  if (bias.ndim() != 2 || bias.dim(0) != w.dim(0) || bias.dim(1) != w.dim(2)) {
    shape_error("grouped_linear(bias)", w.shape(), bias.shape());
  }
  const std::size_t B = x.dim(0), cells = x.dim(1), in = w.dim(1), outd = w.dim(2), G = w.dim(0);
  // rows_of[g] lists flat (b, cell) row indices owned by group g.
  std::vector<std::vector<std::size_t>> rows_of(G);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < cells; ++c) {
      const std::size_t g = group_of_cell[c];
      if (g >= G) throw DimensionError("grouped_linear: group index out of range");
      rows_of[g].push_back(b * cells + c);
    }
  }
  const auto& xv = vals(x);
  std::vector<double> out(B * cells * outd);
  RowMat gathered, result;
  for (std::size_t g = 0; g < G; ++g) {
    const auto& rows = rows_of[g];
    if (rows.empty()) continue;
    gathered.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(in));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(xv.data() + rows[r] * in, in, gathered.data() + r * in);
    }
    result.noalias() = gathered * cmap(vals(w).data() + g * in * outd, in, outd);
    result.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(vals(bias).data() + g * outd,
                                                             static_cast<Eigen::Index>(outd));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(result.data() + r * outd, outd, out.data() + rows[r] * outd);
    }
  }
  return wrap(make_result({B, cells, outd}, std::move(out), "grouped_linear", {&x, &w, &bias}),
              [x, w, bias, rows_of = std::move(rows_of), in, outd](Node& self) {
                auto* gx = sink(x);
                auto* gw = sink(w);
                auto* gb = sink(bias);
                const auto& xv = vals(x);
                RowMat gathered, gout;
                for (std::size_t g = 0; g < rows_of.size(); ++g) {
                  const auto& rows = rows_of[g];
                  if (rows.empty()) continue;
                  const auto n = static_cast<Eigen::Index>(rows.size());
                  gout.resize(n, static_cast<Eigen::Index>(outd));
                  for (std::size_t r = 0; r < rows.size(); ++r) {
                    std::copy_n(self.grad.data() + rows[r] * outd, outd, gout.data() + r * outd);
                  }
                  if (gw) {
                    gathered.resize(n, static_cast<Eigen::Index>(in));
                    for (std::size_t r = 0; r < rows.size(); ++r) {
                      std::copy_n(xv.data() + rows[r] * in, in, gathered.data() + r * in);
                    }
                    mmap(gw->data() + g * in * outd, in, outd).noalias() += gathered.transpose() * gout;
                  }
                  if (gb) {
                    Eigen::Map<Eigen::RowVectorXd>(gb->data() + g * outd, static_cast<Eigen::Index>(outd)) +=
                        gout.colwise().sum();
                  }
                  if (gx) {
                    RowMat dx = gout * cmap(vals(w).data() + g * in * outd, in, outd).transpose();
                    for (std::size_t r = 0; r < rows.size(); ++r) {
                      double* dst = gx->data() + rows[r] * in;
                      for (std::size_t j = 0; j < in; ++j) dst[j] += dx(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
                    }
                  }
                }
              });
}

// --- layout -----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  return wrap(make_result(std::move(shape), vals(a), "reshape", {&a}), [a](Node& self) {
    auto* ga = sink(a);
    for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const auto& s = a.shape();
  const std::size_t n = s.size();
  if (perm.size() != n) throw DimensionError("permute: rank mismatch for " + shape_str(s));
  std::vector<bool> used(n, false);
  for (auto p : perm) {
    if (p >= n || used[p]) throw DimensionError("permute: invalid permutation");
    used[p] = true;
  }
  std::vector<std::size_t> in_stride(n, 1);
  for (std::size_t i = n; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape out_shape(n);
  std::vector<std::size_t> src_stride(n);
  for (std::size_t i = 0; i < n; ++i) {
    out_shape[i] = s[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  // map[out_index] = in_index
  std::vector<std::size_t> map(a.size());
  std::vector<std::size_t> counter(n, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < map.size(); ++o) {
    map[o] = src;
    for (std::size_t d = n; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        src += src_stride[d];
        break;
      }
      src -= src_stride[d] * (out_shape[d] - 1);
      counter[d] = 0;
    }
  }
  const auto& x = vals(a);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < map.size(); ++o) out[o] = x[map[o]];
  return wrap(make_result(out_shape, std::move(out), "permute", {&a}), [a, map = std::move(map)](Node& self) {
    auto* ga = sink(a);
    for (std::size_t o = 0; o < map.size(); ++o) (*ga)[map[o]] += self.grad[o];
  });
}

Tensor transpose_last2(const Tensor& a) {
  if (a.ndim() < 2) throw DimensionError("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> perm(a.ndim());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = split_at(a.shape(), axis);
  if (length == 0 || start + length > sp.len) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") outside " + shape_str(a.shape()));
  }
  const auto& x = vals(a);
  std::vector<double> out(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.data() + (o * sp.len + start) * sp.inner, length * sp.inner,
                out.data() + o * length * sp.inner);
  }
  Shape shape = a.shape();
  shape[axis] = length;
  return wrap(make_result(shape, std::move(out), "narrow", {&a}), [a, sp, start, length](Node& self) {
    auto* ga = sink(a);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t j = 0; j < length * sp.inner; ++j) {
        (*ga)[(o * sp.len + start) * sp.inner + j] += self.grad[o * length * sp.inner + j];
      }
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) shape_error("concat", shape, probe);
    probe[axis] = shape[axis];
    if (probe != shape) shape_error("concat", shape, p.shape());
    total += p.dim(axis);
  }
  shape[axis] = total;
  const auto sp = split_at(shape, axis);
  std::vector<double> out(numel(shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    const auto& x = vals(p);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(x.data() + o * len * sp.inner, len * sp.inner,
                  out.data() + (o * sp.len + offset) * sp.inner);
    }
    offset += len;
  }
  // Variable arity: attach parents by hand.
  auto node = make_result(shape, std::move(out), "concat", {});
  for (const auto& p : parts) {
    if (p.requires_grad() && !NoGradGuard::active()) {
      node->requires_grad = true;
      node->parents.push_back(p.node());
    }
  }
  return wrap(node, [parts, sp, axis](Node& self) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.dim(axis);
      if (auto* gp = sink(p)) {
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t j = 0; j < len * sp.inner; ++j) {
            (*gp)[o * len * sp.inner + j] += self.grad[(o * sp.len + offset) * sp.inner + j];
          }
        }
      }
      offset += len;
    }
  });
}

Tensor repeat_leading(const Tensor& a, std::size_t n) {
  if (a.ndim() < 1 || a.dim(0) != 1) throw DimensionError("repeat_leading expects leading dim 1");
  const auto& x = vals(a);
  std::vector<double> out;
  out.reserve(x.size() * n);
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), x.begin(), x.end());
  Shape shape = a.shape();
  shape[0] = n;
  return wrap(make_result(shape, std::move(out), "repeat_leading", {&a}), [a](Node& self) {
    auto* ga = sink(a);
    const std::size_t m = ga->size();
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i % m] += self.grad[i];
  });
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  if (images.ndim() != 4) throw DimensionError("patchify expects [B,C,H,W], got " + shape_str(images.shape()));
  const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (patch == 0 || H % patch || W % patch) {
    throw ConfigError("image " + std::to_string(H) + "x" + std::to_string(W) +
                      " is not divisible into " + std::to_string(patch) + "-pixel patches");
  }
  const std::size_t gh = H / patch, gw = W / patch, feat = C * patch * patch;
  std::vector<std::size_t> map(images.size());  // out index -> in index
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        const std::size_t token = py * gw + px;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t iy = 0; iy < patch; ++iy) {
            for (std::size_t ix = 0; ix < patch; ++ix) {
              const std::size_t o = (b * gh * gw + token) * feat + (c * patch + iy) * patch + ix;
              map[o] = ((b * C + c) * H + py * patch + iy) * W + px * patch + ix;
            }
          }
        }
      }
    }
  }
  const auto& x = vals(images);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[map[o]];
  return wrap(make_result({B, gh * gw, feat}, std::move(out), "patchify", {&images}),
              [images, map = std::move(map)](Node& self) {
                auto* g = sink(images);
                for (std::size_t o = 0; o < map.size(); ++o) (*g)[map[o]] += self.grad[o];
              });
}

// --- normalization ----------------------------------------------------------

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t D = x.shape().back();
  if (gamma.size() != D || beta.size() != D) shape_error("layernorm", x.shape(), gamma.shape());
  const std::size_t rows = x.size() / D;
  const auto& v = vals(x);
  const auto& gm = vals(gamma);
  const auto& bt = vals(beta);
  std::vector<double> xhat(v.size()), inv_std(rows), out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v.data() + r * D;
    double mu = 0.0;
    for (std::size_t j = 0; j < D; ++j) mu += row[j];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(D);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      xhat[r * D + j] = (row[j] - mu) * inv_std[r];
      out[r * D + j] = xhat[r * D + j] * gm[j] + bt[j];
    }
  }
  return wrap(make_result(x.shape(), std::move(out), "layernorm", {&x, &gamma, &beta}),
              [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, D](Node& self) {
                auto* gx = sink(x);
                auto* gg = sink(gamma);
                auto* gb = sink(beta);
                const auto& gm = vals(gamma);
                for (std::size_t r = 0; r < rows; ++r) {
                  double m1 = 0.0, m2 = 0.0;
                  for (std::size_t j = 0; j < D; ++j) {
                    const std::size_t k = r * D + j;
                    const double dxh = self.grad[k] * gm[j];
                    m1 += dxh;
                    m2 += dxh * xhat[k];
                    if (gg) (*gg)[j] += self.grad[k] * xhat[k];
                    if (gb) (*gb)[j] += self.grad[k];
                  }
                  if (!gx) continue;
                  m1 /= static_cast<double>(D);
                  m2 /= static_cast<double>(D);
                  for (std::size_t j = 0; j < D; ++j) {
                    const std::size_t k = r * D + j;
                    (*gx)[k] += inv_std[r] * (self.grad[k] * gm[j] - m1 - xhat[k] * m2);
                  }
                }
              });
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                   bool train) {
  if (x.ndim() != 4) throw DimensionError("batchnorm2d expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.size() != C || beta.size() != C) shape_error("batchnorm2d", x.shape(), gamma.shape());
  if (state.running_mean.size() != C) {
    state.running_mean.assign(C, 0.0);
    state.running_var.assign(C, 1.0);
  }
  const auto& v = vals(x);
  const auto& gm = vals(gamma);
  const auto& bt = vals(beta);
  std::vector<double> mean(C), inv_std(C), xhat(v.size()), out(v.size());
  const double count = static_cast<double>(B * HW);
  for (std::size_t c = 0; c < C; ++c) {
    if (train) {
      double mu = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = v.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) mu += p[i];
      }
      mu /= count;
      double var = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = v.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= count;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      state.running_mean[c] = (1 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (1 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t base = (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        xhat[base + i] = (v[base + i] - mean[c]) * inv_std[c];
        out[base + i] = xhat[base + i] * gm[c] + bt[c];
      }
    }
  }
  return wrap(make_result(x.shape(), std::move(out), "batchnorm2d", {&x, &gamma, &beta}),
              [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), B, C, HW, train,
               count](Node& self) {
                auto* gx = sink(x);
                auto* gg = sink(gamma);
                auto* gb = sink(beta);
                const auto& gm = vals(gamma);
                for (std::size_t c = 0; c < C; ++c) {
                  double m1 = 0.0, m2 = 0.0;
                  for (std::size_t b = 0; b < B; ++b) {
                    const std::size_t base = (b * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                      m1 += self.grad[base + i];
                      m2 += self.grad[base + i] * xhat[base + i];
                    }
                  }
                  if (gg) (*gg)[c] += m2;
                  if (gb) (*gb)[c] += m1;
                  if (!gx) continue;
                  const double k = gm[c] * inv_std[c];
                  for (std::size_t b = 0; b < B; ++b) {
                    const std::size_t base = (b * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                      const double g = self.grad[base + i];
                      (*gx)[base + i] += train ? k * (g - m1 / count - xhat[base + i] * m2 / count) : k * g;
                    }
                  }
                }
              });
}

// --- convolution and pooling --------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  if (x.ndim() != 4 || kernel.ndim() != 4 || x.dim(1) != kernel.dim(1) || kernel.dim(2) != kernel.dim(3)) {
    shape_error("conv2d", x.shape(), kernel.shape());
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = kernel.dim(0), k = kernel.dim(2);
  if (padding >= k) throw ConfigError("conv2d: padding must be smaller than the kernel extent");
  if (H + 2 * padding < k || W + 2 * padding < k) {
    throw ConfigError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel after padding");
  }
  if (bias.defined() && bias.size() != Cout) shape_error("conv2d(bias)", kernel.shape(), bias.shape());
  const std::size_t OH = (H + 2 * padding - k) / stride + 1;
  const std::size_t OW = (W + 2 * padding - k) / stride + 1;
  const std::size_t K = Cin * k * k, P = OH * OW;

  // Column matrix per sample: [K, P]; -1 marks padding.
  std::vector<std::ptrdiff_t> src(K * P);
  for (std::size_t c = 0; c < Cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::size_t row = (c * k + ky) * k + kx;
        for (std::size_t oy = 0; oy < OH; ++oy) {
          for (std::size_t ox = 0; ox < OW; ++ox) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(H) &&
                                ix < static_cast<std::ptrdiff_t>(W);
            src[row * P + oy * OW + ox] =
                inside ? static_cast<std::ptrdiff_t>((c * H + static_cast<std::size_t>(iy)) * W +
                                                     static_cast<std::size_t>(ix))
                       : -1;
          }
        }
      }
    }
  }
  const auto& xv = vals(x);
  const std::size_t in_per = Cin * H * W;
  std::vector<double> cols(B * K * P);
  for (std::size_t b = 0; b < B; ++b) {
    const double* xb = xv.data() + b * in_per;
    double* cb = cols.data() + b * K * P;
    for (std::size_t i = 0; i < K * P; ++i) cb[i] = src[i] >= 0 ? xb[src[i]] : 0.0;
  }
  std::vector<double> out(B * Cout * P);
  const auto wmat = cmap(vals(kernel).data(), Cout, K);
  for (std::size_t b = 0; b < B; ++b) {
    auto y = mmap(out.data() + b * Cout * P, Cout, P);
    y.noalias() = wmat * cmap(cols.data() + b * K * P, K, P);
    if (bias.defined()) {
      y.colwise() += Eigen::Map<const Eigen::VectorXd>(vals(bias).data(), static_cast<Eigen::Index>(Cout));
    }
  }
  return wrap(make_result({B, Cout, OH, OW}, std::move(out), "conv2d", {&x, &kernel, &bias}),
              [x, kernel, bias, cols = std::move(cols), src = std::move(src), B, Cout, K, P, in_per](Node& self) {
                auto* gx = sink(x);
                auto* gk = sink(kernel);
                auto* gb = sink(bias);
                const auto wmat = cmap(vals(kernel).data(), Cout, K);
                RowMat dcols;
                for (std::size_t b = 0; b < B; ++b) {
                  const auto g = cmap(self.grad.data() + b * Cout * P, Cout, P);
                  if (gk) mmap(gk->data(), Cout, K).noalias() += g * cmap(cols.data() + b * K * P, K, P).transpose();
                  if (gb) Eigen::Map<Eigen::VectorXd>(gb->data(), static_cast<Eigen::Index>(Cout)) += g.rowwise().sum();
                  if (gx) {
                    dcols.noalias() = wmat.transpose() * g;
                    double* gxb = gx->data() + b * in_per;
                    const double* d = dcols.data();
                    for (std::size_t i = 0; i < K * P; ++i) {
                      if (src[i] >= 0) gxb[src[i]] += d[i];
                    }
                  }
                }
              });
}

Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.ndim() != 4) throw DimensionError("adaptive_avg_pool2d expects [B,C,H,W], got " + shape_str(x.shape()));
  if (out_h == 0 || out_w == 0) throw ConfigError("adaptive_avg_pool2d: empty output grid");
  const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_h == H && out_w == W) return x;
  auto window = [](std::size_t i, std::size_t in, std::size_t out) {
    return std::pair<std::size_t, std::size_t>{i * in / out, ((i + 1) * in + out - 1) / out};
  };
  const auto& v = vals(x);
  std::vector<double> out(BC * out_h * out_w);
  for (std::size_t p = 0; p < BC; ++p) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1] = window(oy, H, out_h);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1] = window(ox, W, out_w);
        double s = 0.0;
        for (std::size_t iy = y0; iy < y1; ++iy) {
          for (std::size_t ix = x0; ix < x1; ++ix) s += v[(p * H + iy) * W + ix];
        }
        out[(p * out_h + oy) * out_w + ox] = s / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  }
  return wrap(make_result({x.dim(0), x.dim(1), out_h, out_w}, std::move(out), "adaptive_avg_pool2d", {&x}),
              [x, BC, H, W, out_h, out_w, window](Node& self) {
                auto* gx = sink(x);
                for (std::size_t p = 0; p < BC; ++p) {
                  for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto [y0, y1] = window(oy, H, out_h);
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                      const auto [x0, x1] = window(ox, W, out_w);
                      const double g = self.grad[(p * out_h + oy) * out_w + ox] /
                                       static_cast<double>((y1 - y0) * (x1 - x0));
                      for (std::size_t iy = y0; iy < y1; ++iy) {
                        for (std::size_t ix = x0; ix < x1; ++ix) (*gx)[(p * H + iy) * W + ix] += g;
                      }
                    }
                  }
                }
              });
}

}  // namespace crosskd
