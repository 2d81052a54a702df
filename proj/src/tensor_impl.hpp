#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "crosskd/tensor.hpp"

namespace crosskd::detail {

struct Node {
  Shape shape;
  std::shared_ptr<std::vector<double>> storage;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;
  std::string op = "leaf";
};

std::vector<double>& grad_buffer(Node& n);

Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad);

/// Output node for an op; requires_grad iff any input does. Validates finiteness.
std::shared_ptr<Node> make_result(Shape shape, std::vector<double> values, const char* op,
                                  std::initializer_list<const Tensor*> inputs);

inline const std::vector<double>& vals(const Tensor& t) { return *t.node()->storage; }

/// Gradient sink for an input, or nullptr if it does not need one.
inline std::vector<double>* sink(const Tensor& t) {
  return (t.defined() && t.requires_grad()) ? &grad_buffer(*t.node()) : nullptr;
}

}  // namespace crosskd::detail
