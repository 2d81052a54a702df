#include "crosskd/grad_suite.hpp"

#include <chrono>
#include <cstdio>

#include "crosskd/projectors.hpp"
#include "crosskd/rng.hpp"
#include "crosskd/robust.hpp"
#include "crosskd/trainer.hpp"

namespace crosskd {

namespace {

Tensor randn(Shape shape, RngStream& rng, bool grad = true, double scale_by = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale_by * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

Tensor rand_range(Shape shape, RngStream& rng, double lo, double hi, bool grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

/// Contracts an output with fixed random weights so every element matters.
Tensor probe(const Tensor& out, std::uint64_t seed) {
  RngStream rng(seed, "grad/probe");
  return sum(mul(out, randn(out.shape(), rng, false)));
}

using Builder = std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(RngStream&, std::uint64_t)>;

GradSuiteItem item(std::string name, Builder build) {
  return {name, [name, build](std::uint64_t seed, double tol) {
            RngStream rng(seed, "grad/" + name);
            auto [f, params] = build(rng, seed);
            return grad_check(name, f, params, 1e-5, tol);
          }};
}

std::vector<GradSuiteItem> make_suite() {
  std::vector<GradSuiteItem> s;
  using Params = std::vector<Tensor>;
  using F = std::function<Tensor()>;
  using Out = std::pair<F, Params>;

  s.push_back(item("add", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({2, 3, 4}, r), b = randn({3, 4}, r);
    return {[=] { return probe(add(a, b), k); }, {a, b}};
  }));
  s.push_back(item("sub", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({2, 3, 4}, r), b = randn({4}, r);
    return {[=] { return probe(sub(a, b), k); }, {a, b}};
  }));
  s.push_back(item("mul", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({3, 4}, r), b = randn({3, 4}, r);
    return {[=] { return probe(mul(a, b), k); }, {a, b}};
  }));
  s.push_back(item("scale", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({5}, r);
    return {[=] { return probe(scale(a, -1.7), k); }, {a}};
  }));
  s.push_back(item("add_scalar", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({5}, r);
    return {[=] { return probe(add_scalar(a, 0.3), k); }, {a}};
  }));
  s.push_back(item("neg", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({5}, r);
    return {[=] { return probe(neg(a), k); }, {a}};
  }));
  s.push_back(item("matmul", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({3, 4}, r), b = randn({4, 2}, r);
    return {[=] { return probe(matmul(a, b), k); }, {a, b}};
  }));
  s.push_back(item("bmm", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({2, 3, 4}, r), b = randn({2, 4, 2}, r);
    return {[=] { return probe(bmm(a, b), k); }, {a, b}};
  }));
  s.push_back(item("transpose_last2", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({2, 3, 4}, r);
    return {[=] { return probe(transpose_last2(a), k); }, {a}};
  }));
  s.push_back(item("permute", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({2, 3, 4}, r);
    return {[=] { return probe(permute(a, {2, 0, 1}), k); }, {a}};
  }));
  s.push_back(item("reshape", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({2, 6}, r);
    return {[=] { return probe(reshape(a, {3, 4}), k); }, {a}};
  }));
  s.push_back(item("narrow", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({2, 5, 3}, r);
    return {[=] { return probe(narrow(a, 1, 1, 3), k); }, {a}};
  }));
  s.push_back(item("concat", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({2, 2, 3}, r), b = randn({2, 1, 3}, r);
    return {[=] { return probe(concat({a, b}, 1), k); }, {a, b}};
  }));
  s.push_back(item("repeat_leading", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({1, 2, 3}, r);
    return {[=] { return probe(repeat_leading(a, 3), k); }, {a}};
  }));
  s.push_back(item("mean_axis", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({2, 3, 4}, r);
    return {[=] { return probe(mean_axis(a, 1), k); }, {a}};
  }));
  s.push_back(item("sum", [](RngStream& r, std::uint64_t) -> Out {
    auto a = randn({3, 4}, r);
    return {[=] { return sum(mul(a, a)); }, {a}};
  }));
  s.push_back(item("mean", [](RngStream& r, std::uint64_t) -> Out {
    auto a = randn({3, 4}, r);
    return {[=] { return mean(mul(a, a)); }, {a}};
  }));
  s.push_back(item("relu", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({4, 5}, r);
    return {[=] { return probe(relu(a), k); }, {a}};
  }));
  s.push_back(item("leaky_relu", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({4, 5}, r);
    return {[=] { return probe(leaky_relu(a, 0.2), k); }, {a}};
  }));
  s.push_back(item("gelu", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({4, 5}, r);
    return {[=] { return probe(gelu(a), k); }, {a}};
  }));
  s.push_back(item("sigmoid", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({4, 5}, r, true, 2.0);
    return {[=] { return probe(sigmoid(a), k); }, {a}};
  }));
  s.push_back(item("exp", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({4, 5}, r);
    return {[=] { return probe(exp(a), k); }, {a}};
  }));
  s.push_back(item("log", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = rand_range({4, 5}, r, 0.5, 2.0);
    return {[=] { return probe(log_clamped(a, 1e-12), k); }, {a}};
  }));
  s.push_back(item("softmax", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({2, 3, 4}, r);
    return {[=] { return probe(softmax(a, 1), k); }, {a}};
  }));
  s.push_back(item("log_softmax", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({3, 5}, r);
    return {[=] { return probe(log_softmax(a, 1), k); }, {a}};
  }));
  s.push_back(item("mse", [](RngStream& r, std::uint64_t) -> Out {
    auto a = randn({3, 4}, r), b = randn({3, 4}, r);
    return {[=] { return mse(a, b); }, {a, b}};
  }));
  s.push_back(item("cross_entropy", [](RngStream& r, std::uint64_t) -> Out {
    auto a = randn({4, 3}, r);
    std::vector<int> y{0, 2, 1, 2};
    return {[=] { return cross_entropy_with_logits(a, y); }, {a}};
  }));
  s.push_back(item("linear", [](RngStream& r, std::uint64_t k) -> Out {
    auto x = randn({2, 3, 4}, r), w = randn({4, 5}, r), b = randn({5}, r);
    return {[=] { return probe(linear(x, w, b), k); }, {x, w, b}};
  }));
  s.push_back(item("grouped_linear", [](RngStream& r, std::uint64_t k) -> Out {
    auto x = randn({2, 5, 3}, r), w = randn({2, 3, 4}, r), b = randn({2, 4}, r);
    std::vector<std::size_t> groups{0, 1, 1, 0, 1};
    return {[=] { return probe(grouped_linear(x, w, b, groups), k); }, {x, w, b}};
  }));
  s.push_back(item("conv2d", [](RngStream& r, std::uint64_t k) -> Out {
    auto x = randn({2, 2, 5, 5}, r), w = randn({3, 2, 3, 3}, r), b = randn({3}, r);
    return {[=] { return probe(conv2d(x, w, b, 1, 1), k); }, {x, w, b}};
  }));
  s.push_back(item("conv2d_strided", [](RngStream& r, std::uint64_t k) -> Out {
    auto x = randn({1, 2, 6, 6}, r), w = randn({2, 2, 3, 3}, r);
    return {[=] { return probe(conv2d(x, w, Tensor(), 2, 1), k); }, {x, w}};
  }));
  s.push_back(item("adaptive_avg_pool2d", [](RngStream& r, std::uint64_t k) -> Out {
    auto x = randn({2, 2, 5, 7}, r);
    return {[=] { return probe(adaptive_avg_pool2d(x, 3, 4), k); }, {x}};
  }));
  s.push_back(item("layernorm", [](RngStream& r, std::uint64_t k) -> Out {
    auto x = randn({3, 6}, r), g = randn({6}, r), b = randn({6}, r);
    return {[=] { return probe(layernorm(x, g, b), k); }, {x, g, b}};
  }));
  s.push_back(item("batchnorm2d", [](RngStream& r, std::uint64_t k) -> Out {
    auto x = randn({3, 2, 3, 3}, r), g = randn({2}, r), b = randn({2}, r);
    return {[=] {
              BatchNormState st{{0, 0}, {1, 1}};
              return probe(batchnorm2d(x, g, b, st, true), k);
            },
            {x, g, b}};
  }));
  s.push_back(item("dropout", [](RngStream& r, std::uint64_t k) -> Out {
    auto x = randn({4, 5}, r);
    return {[=] {
              RngStream mask(k, "grad/dropout-mask");
              return probe(dropout(x, 0.3, true, mask), k);
            },
            {x}};
  }));
  s.push_back(item("where", [](RngStream& r, std::uint64_t k) -> Out {
    auto a = randn({3, 4}, r), b = randn({3, 4}, r);
    std::vector<std::uint8_t> m(12);
    for (auto& v : m) v = r.uniform() < 0.5;
    return {[=] { return probe(where(m, a, b), k); }, {a, b}};
  }));
  s.push_back(item("patchify", [](RngStream& r, std::uint64_t k) -> Out {
    auto x = randn({2, 3, 4, 4}, r);
    return {[=] { return probe(patchify(x, 2), k); }, {x}};
  }));
  s.push_back(item("attention", [](RngStream& r, std::uint64_t k) -> Out {
    auto q = randn({2, 3, 2}, r), kk = randn({2, 3, 2}, r), v = randn({2, 3, 2}, r);
    return {[=] { return probe(attention(q, kk, v, 2.0), k); }, {q, kk, v}};
  }));

  // Projector losses.
  s.push_back(item("loss_proj1_gram", [](RngStream& r, std::uint64_t) -> Out {
    auto q = randn({2, 4, 2}, r), kk = randn({2, 4, 2}, r), v = randn({2, 4, 2}, r);
    auto qt = randn({2, 4, 2}, r, false), kt = randn({2, 4, 2}, r, false), vt = randn({2, 4, 2}, r, false);
    const auto mask = ReplacementMask::sample(q.size(), r, 0.5);
    const auto attn_t = attention(qt, kt, vt, 2.0);
    return {[=] {
              const auto pc = pca_attention({q, kk, v}, {qt, kt, vt}, mask);
              return loss_proj1(pc, attn_t, v, vt, 2.0, ValueRelation::Gram);
            },
            {q, kk, v}};
  }));
  s.push_back(item("loss_proj1_elementwise", [](RngStream& r, std::uint64_t) -> Out {
    auto q = randn({2, 4, 2}, r), kk = randn({2, 4, 2}, r), v = randn({2, 4, 2}, r);
    auto qt = randn({2, 4, 2}, r, false), kt = randn({2, 4, 2}, r, false), vt = randn({2, 4, 2}, r, false);
    const auto mask = ReplacementMask::sample(q.size(), r, 0.5);
    const auto attn_t = attention(qt, kt, vt, 2.0);
    return {[=] {
              const auto pc = pca_attention({q, kk, v}, {qt, kt, vt}, mask);
              return loss_proj1(pc, attn_t, v, vt, 2.0, ValueRelation::Elementwise);
            },
            {q, kk, v}};
  }));
  s.push_back(item("pca_projector", [](RngStream& r, std::uint64_t) -> Out {
    auto proj = std::make_shared<PcaProjector>(3, 2, 2, 2, r);
    auto h = randn({2, 3, 4, 4}, r);
    auto qt = randn({2, 4, 2}, r, false), kt = randn({2, 4, 2}, r, false), vt = randn({2, 4, 2}, r, false);
    const auto mask = ReplacementMask::sample(qt.size(), r, 0.5);
    const auto attn_t = attention(qt, kt, vt, 2.0);
    Params params{h};
    for (auto& [n, p] : proj->parameters()) params.push_back(p);
    return {[=] {
              const auto tri = proj->project(h);
              return loss_proj1(pca_attention(tri, {qt, kt, vt}, mask), attn_t, tri.value, vt, 2.0);
            },
            params};
  }));
  s.push_back(item("loss_proj2", [](RngStream& r, std::uint64_t) -> Out {
    auto ht = randn({2, 4, 3}, r, false), hs = randn({2, 4, 3}, r);
    return {[=] { return loss_proj2(ht, hs); }, {hs}};
  }));
  s.push_back(item("gl_projector", [](RngStream& r, std::uint64_t) -> Out {
    auto proj = std::make_shared<GlProjector>(2, 3, 4, 4, 2, 2, 0.0, r);
    auto h = randn({2, 2, 4, 4}, r);
    auto ht = randn({2, 4, 3}, r, false);
    return {[=] {
              RngStream drop(0, "grad/gl-dropout");
              return loss_proj2(ht, proj->project(h, false, drop));
            },
            {h, proj->weight, proj->bias}};
  }));

  // Adversarial losses.
  s.push_back(item("loss_mad", [](RngStream& r, std::uint64_t) -> Out {
    auto disc = std::make_shared<Discriminator>(2, 3, 4, r);
    auto ht = randn({3, 2, 3}, r, false), hs = randn({3, 2, 3}, r, false);
    Params params;
    for (auto& [n, p] : disc->parameters()) params.push_back(p);
    return {[=] { return loss_mad(*disc, ht, hs); }, params};
  }));
  s.push_back(item("loss_mvg", [](RngStream& r, std::uint64_t) -> Out {
    auto disc = std::make_shared<Discriminator>(2, 3, 4, r);
    auto hs = randn({3, 2, 3}, r);
    return {[=] { return loss_mvg(*disc, hs, false); }, {hs}};
  }));
  s.push_back(item("loss_mvg_non_saturating", [](RngStream& r, std::uint64_t) -> Out {
    auto disc = std::make_shared<Discriminator>(2, 3, 4, r);
    auto hs = randn({3, 2, 3}, r);
    return {[=] { return loss_mvg(*disc, hs, true); }, {hs}};
  }));
  s.push_back(item("logits_baseline_loss", [](RngStream& r, std::uint64_t) -> Out {
    auto ls = randn({3, 4}, r), lt = randn({3, 4}, r, false);
    std::vector<int> y{1, 3, 0};
    return {[=] { return logits_baseline_loss(ls, lt, y, 2.0, 0.7).total; }, {ls}};
  }));
  return s;
}

}  // namespace

const std::vector<GradSuiteItem>& grad_suite() {
  static const std::vector<GradSuiteItem> suite = make_suite();
  return suite;
}

GradSuiteResult run_grad_suite(std::span<const std::uint64_t> seeds, double tol, std::ostream* log) {
  const auto start = std::chrono::steady_clock::now();
  GradSuiteResult result;
  result.passed = true;
  for (const auto& it : grad_suite()) {
    for (auto seed : seeds) {
      auto rep = it.run(seed, tol);
      result.worst = std::max(result.worst, rep.worst);
      result.passed = result.passed && rep.passed;
      if (log) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-26s seed=%-3llu max_rel_err=%.3e %s\n", it.name.c_str(),
                      static_cast<unsigned long long>(seed), rep.worst, rep.passed ? "ok" : "FAIL");
        *log << buf;
      }
      result.reports.push_back(std::move(rep));
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace crosskd
