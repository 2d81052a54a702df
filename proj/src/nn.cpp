#include "crosskd/nn.hpp"

#include <cmath>
#include <cstring>

namespace crosskd {

Tensor init_fan_in_uniform(Shape shape, std::size_t fan_in, RngStream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor init_truncated_normal(Shape shape, double std, RngStream& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    x = z * std;
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear::Linear(std::size_t in, std::size_t out, RngStream& rng, InitScheme scheme) {
  if (scheme == InitScheme::FanInUniform) {
    weight = init_fan_in_uniform({in, out}, in, rng);
    bias = init_fan_in_uniform({out}, in, rng);
  } else {
    weight = init_truncated_normal({in, out}, 0.02, rng);
    bias = Tensor::zeros({out}, true);
  }
}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_,
               std::size_t padding_, RngStream& rng, bool with_bias)
    : stride(stride_), padding(padding_) {
  const std::size_t fan_in = in * kernel * kernel;
  weight = init_fan_in_uniform({out, in, kernel, kernel}, fan_in, rng);
  if (with_bias) bias = init_fan_in_uniform({out}, fan_in, rng);
}

void Conv2d::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t dim)
    : gamma(Tensor::full({dim}, 1.0, true)), beta(Tensor::zeros({dim}, true)) {}

void LayerNorm::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

BatchNorm2d::BatchNorm2d(std::size_t channels)
    : gamma(Tensor::full({channels}, 1.0, true)), beta(Tensor::zeros({channels}, true)) {
  state.running_mean.assign(channels, 0.0);
  state.running_var.assign(channels, 1.0);
}

void BatchNorm2d::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

void BatchNorm2d::collect_buffers(const std::string& prefix, NamedBuffers& out) {
  out.push_back({prefix + ".running_mean", &state.running_mean});
  out.push_back({prefix + ".running_var", &state.running_var});
}

std::uint64_t checksum(const NamedTensors& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.size() * sizeof(double));
  }
  return h;
}

std::size_t parameter_count(const NamedTensors& params) {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.size();
  return n;
}

void set_requires_grad(const NamedTensors& params, bool on) {
  for (auto [_, t] : params) t.set_requires_grad(on);
}

}  // namespace crosskd
