#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "crosskd/rng.hpp"
#include "crosskd/tensor.hpp"

namespace crosskd::testing {

inline Tensor randn(Shape shape, std::uint64_t seed, const std::string& label = "test", bool grad = false) {
  RngStream rng(seed, label);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

inline Tensor uniform01(Shape shape, std::uint64_t seed, const std::string& label = "test") {
  RngStream rng(seed, label);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform();
  return Tensor::from(std::move(shape), std::move(v));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("crosskd_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace crosskd::testing
