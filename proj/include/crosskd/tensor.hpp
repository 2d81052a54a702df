#pragma once

// Dense fp64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Every op builds a fresh
// node holding its output and a closure that pushes the output gradient
// back into its inputs. Calling backward() on a scalar walks the graph in
// reverse topological order; leaf tensors with requires_grad accumulate
// into their grad buffer until zero_grad().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace crosskd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class RngStream;

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t size() const;

  std::span<const double> data() const;
  /// Raw write access. Only legal on leaves between steps (optimizers,
  /// finite-difference probes, initializers).
  std::span<double> mutable_data();
  std::vector<double> values() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Seeds d(this)/d(this) = 1 and accumulates into every reachable leaf.
  void backward() const;

  /// Leaf sharing this tensor's storage, cut off from the graph.
  Tensor detach() const;
  /// Deep copy, detached.
  Tensor clone() const;

  const std::string& op_name() const;

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// While alive, ops on this thread record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active();

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Ops. All differentiable unless noted.

Tensor add(const Tensor& a, const Tensor& b);  // b may broadcast as a suffix of a's shape
Tensor sub(const Tensor& a, const Tensor& b);  // same broadcasting as add
Tensor mul(const Tensor& a, const Tensor& b);  // same shapes
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]·[k,n]
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,m,k]·[B,k,n]
Tensor transpose_last2(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor reshape(const Tensor& a, Shape shape);
Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// [1, ...] -> [n, ...]
Tensor repeat_leading(const Tensor& a, std::size_t n);
Tensor mean_axis(const Tensor& a, std::size_t axis);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor gelu(const Tensor& a);
/// Logistic function; outputs are kept strictly inside (0, 1).
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
/// log(max(a, floor)); gradient is zero where the floor is active.
Tensor log_clamped(const Tensor& a, double floor);
inline Tensor log(const Tensor& a) { return log_clamped(a, 0.0); }

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

/// Mean over all elements of (a - b)^2.
Tensor mse(const Tensor& a, const Tensor& b);
/// Mean over the batch of -log softmax(logits)[label]. logits is [B, C].
Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> labels);

/// x·w + bias, where x is [..., in], w is [in, out], bias is [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Per-row affine map selected by group: x is [B, cells, in], w is [G, in, out],
/// bias is [G, out], group_of_cell has one entry per cell.
Tensor grouped_linear(const Tensor& x, const Tensor& w, const Tensor& bias,
                      std::span<const std::size_t> group_of_cell);

/// Cross-correlation. x [B, Cin, H, W], kernel [Cout, Cin, k, k], bias [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding);

/// PyTorch-style adaptive average pooling over the last two axes of [B, C, H, W].
Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// Normalizes over the last axis, then applies gamma/beta ([D] each).
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// x [B, C, H, W]. Train mode normalizes with batch statistics and updates
/// the running estimates in `state`; eval mode uses the running estimates.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                   bool train);

/// Inverted dropout. Identity when !train or rate == 0.
Tensor dropout(const Tensor& x, double rate, bool train, RngStream& rng);

/// Element-wise select: mask ? when_true : when_false. Shapes must agree.
Tensor where(std::span<const std::uint8_t> mask, const Tensor& when_true, const Tensor& when_false);

/// [B, C, H, W] image batch -> [B, (H/p)(W/p), C·p·p] row-major patch tokens.
Tensor patchify(const Tensor& images, std::size_t patch);

/// Throws NumericError naming `where` if any value is NaN/Inf.
void check_finite(const Tensor& t, const std::string& where);

}  // namespace crosskd
