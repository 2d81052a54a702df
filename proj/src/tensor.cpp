#include "crosskd/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "crosskd/errors.hpp"
#include "tensor_impl.hpp"

namespace crosskd {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_no_grad = false;

// Graph buffers are allocated and freed every step; keeping them on the heap
// instead of fresh mmaps avoids a page-fault storm.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
}

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

namespace detail {

std::vector<double>& grad_buffer(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.storage->size(), 0.0);
  return n.grad;
}

Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->storage = std::make_shared<std::vector<double>>(std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

std::shared_ptr<Node> make_result(Shape shape, std::vector<double> values, const char* op,
                                  std::initializer_list<const Tensor*> inputs) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->storage = std::make_shared<std::vector<double>>(std::move(values));
  node->op = op;
  if (!g_no_grad) {
    for (const Tensor* in : inputs) {
      if (in && in->defined() && in->requires_grad()) node->requires_grad = true;
    }
  }
  if (node->requires_grad) {
    for (const Tensor* in : inputs) {
      if (in && in->defined() && in->requires_grad()) node->parents.push_back(in->node());
    }
  }
  for (double v : *node->storage) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
  return node;
}

}  // namespace detail

using detail::Node;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = numel(shape);
  return detail::make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel(shape);
  return detail::make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor literal");
  }
  return detail::make_leaf(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->storage->size(); }

std::span<const double> Tensor::data() const { return *node_->storage; }
std::span<double> Tensor::mutable_data() { return *node_->storage; }
std::vector<double> Tensor::values() const { return *node_->storage; }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return (*node_->storage)[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != ndim()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape()[axis]) throw DimensionError("index out of range for " + shape_str(shape()));
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return (*node_->storage)[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ConfigError("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

bool Tensor::is_leaf() const { return node_->parents.empty() && !node_->backward; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return detail::grad_buffer(*node_); }
void Tensor::zero_grad() { node_->grad.clear(); }
const std::string& Tensor::op_name() const { return node_->op; }

void Tensor::backward() const {
  if (size() != 1) throw DimensionError("backward() needs a scalar, got " + shape_str(shape()));
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  detail::grad_buffer(*node_)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) {
      n->backward(*n);
      for (double g : n->grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient flowing out of " + n->op);
      }
    }
  }
  // Interior gradients are only needed during the sweep.
  for (Node* n : order) {
    if (n->backward) std::vector<double>().swap(n->grad);
  }
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->storage = node_->storage;
  node->op = "detach";
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  return detail::make_leaf(node_->shape, *node_->storage, false);
}

void check_finite(const Tensor& t, const std::string& where) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + where);
  }
}

}  // namespace crosskd
