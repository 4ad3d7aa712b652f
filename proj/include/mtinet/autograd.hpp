#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mtinet/tensor.hpp"

namespace mtinet {

/// One vertex of the recorded computation graph.
struct Node {
  Tensor value;
  Tensor grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads `grad` of this node and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;
};

/// Handle to a graph node. Copies share the node.
///
/// Leaves created with requires_grad = true are trainable parameters; every
/// op output that depends on one records its inputs and a backward closure.
/// A graph belongs to the thread that built it.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  /// In-place access for optimizers, checkpoint loading and perturbation tests.
  Tensor& value_mut() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_mut() { return node_->grad; }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }

  /// Constant copy of the current value, cut off from the graph.
  Var detach() const;

  const std::shared_ptr<Node>& node() const noexcept { return node_; }
  static Var from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

bool grad_mode_enabled() noexcept;

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// While alive, batch_norm in training mode normalizes with batch statistics
/// but leaves the running averages untouched (current thread only).
class FrozenStatsGuard {
 public:
  FrozenStatsGuard();
  ~FrozenStatsGuard();
  FrozenStatsGuard(const FrozenStatsGuard&) = delete;
  FrozenStatsGuard& operator=(const FrozenStatsGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse-mode sweep from a scalar loss. Every node reachable from `loss`
/// has its gradient reset to zero before propagation, so calls never
/// accumulate into each other.
void backward(const Var& loss);

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). std::map keeps iteration lexicographic.
class ParameterSet {
 public:
  Var& add(const std::string& name, Tensor value);
  Var& add_buffer(const std::string& name, Tensor value);

  const std::map<std::string, Var>& parameters() const noexcept { return params_; }
  std::map<std::string, Var>& parameters() noexcept { return params_; }
  const std::map<std::string, Var>& buffers() const noexcept { return buffers_; }
  std::map<std::string, Var>& buffers() noexcept { return buffers_; }

  Var& at(const std::string& name);
  const Var& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t element_count() const;

  /// Resets every parameter gradient to a zero buffer of matching shape.
  void zero_grad();
  std::vector<Var> list() const;

 private:
  std::map<std::string, Var> params_;
  std::map<std::string, Var> buffers_;
};

/// Zeroes every parameter gradient, then runs backward(loss). Parameters
/// the loss does not reach end up holding zeros.
void backward(const Var& loss, ParameterSet& params);

namespace ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
/// Elementwise product with constant data of the same shape.
Var mul_const(const Var& a, const Tensor& c);
/// Divides every element of `a` by the single-element `s`.
Var div_scalar(const Var& a, const Var& s);

Var sum(const Var& a);
Var mean(const Var& a);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var abs(const Var& a);
/// log(clamp(a, lo, hi)); zero gradient where the clamp is active.
Var log_clamped(const Var& a, double lo, double hi);

Var reshape(const Var& a, Shape shape);
/// Concatenates along axis 0; trailing extents must agree.
Var concat(std::span<const Var> parts);
/// Rows [begin, begin + count) along axis 0.
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var transpose(const Var& a);

/// [m,k] x [k,n]
Var matmul(const Var& a, const Var& b);
/// [m,k] x [n,k]^T
Var matmul_nt(const Var& a, const Var& b);
/// x [n,in] or [in], weight [out,in], bias [out] -> [n,out] or [out].
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Softmax over the last axis (rank 1 or 2), max-shifted.
Var softmax_rows(const Var& a);
/// Per-row normalization over the last axis with affine gamma/beta.
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);
/// [n,m] -> [m]
Var mean_rows(const Var& a);
/// a [n,m] plus bias [m] on every row.
Var add_bias_rows(const Var& a, const Var& bias);

/// x [C,H,W], weight [Co,C,k,k], bias [Co]; stride 1.
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t pad);
/// x [C,H,W], weight [C,Co,k,k], bias [Co] -> [Co,(H-1)s-2p+k, ...].
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad);

struct BatchNormState {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
  std::size_t groups = 1;
};
/// x [G*C,H,W] holds a batch of G images of C channels each, image-major.
/// Training mode normalizes channel c with statistics over every image and
/// spatial position of that channel; inference mode uses the running statistics.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, const BatchNormState& state, bool training);

/// 2x2 window, stride 2. Even extents required.
Var max_pool2x2(const Var& x);
/// [C,H,W] -> [C]
Var global_avg_pool(const Var& x);
/// x [C,H,W] times per-channel s [C].
Var channel_scale(const Var& x, const Var& s);

}  // namespace ops

}  // namespace mtinet
