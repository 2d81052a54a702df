#pragma once

// Parameter-holding layers shared by the teacher, student, projectors and
// discriminator.

#include <string>
#include <utility>
#include <vector>

#include "crosskd/rng.hpp"
#include "crosskd/tensor.hpp"

namespace crosskd {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Non-trainable state that still belongs in a checkpoint (batchnorm statistics).
struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};
using NamedBuffers = std::vector<NamedBuffer>;

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor init_fan_in_uniform(Shape shape, std::size_t fan_in, RngStream& rng);
/// N(0, std^2) truncated to ±2 std.
Tensor init_truncated_normal(Shape shape, double std, RngStream& rng);

enum class InitScheme { FanInUniform, TruncatedNormal };

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, RngStream& rng, InitScheme scheme = InitScheme::FanInUniform);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct Conv2d {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  std::size_t stride = 1;
  std::size_t padding = 1;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
         RngStream& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layernorm(x, gamma, beta); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct BatchNorm2d {
  Tensor gamma, beta;
  BatchNormState state;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);
  Tensor operator()(const Tensor& x, bool train) { return batchnorm2d(x, gamma, beta, state, train); }
  void collect(const std::string& prefix, NamedTensors& out) const;
  void collect_buffers(const std::string& prefix, NamedBuffers& out);
};

/// Order-sensitive digest of parameter bytes; used to prove weights are untouched.
std::uint64_t checksum(const NamedTensors& params);

std::size_t parameter_count(const NamedTensors& params);

void set_requires_grad(const NamedTensors& params, bool on);

}  // namespace crosskd
