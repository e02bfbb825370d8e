#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "snaplab/tensor.hpp"

/// Minimal reverse-mode automatic differentiation over row-major matrices.
///
/// Each op produces a new graph node. Nodes only record parents and a backward
/// closure when at least one input requires gradients, so inference-only code
/// pays for the forward computation alone.
namespace snaplab::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Tensor& g);
};

class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  /// Trainable leaf; gradients accumulate until zero_grad().
  static Var leaf(Tensor value);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  /// Accumulated gradient; a zero tensor of the value's shape when none has flowed.
  Tensor grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;
  void zero_grad();
  Var detach() const { return constant(value()); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  friend Var make_result(Tensor, std::vector<Var>, std::function<void(Node&)>);

  std::shared_ptr<Node> node_;
};

/// While alive on the current thread, ops record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Builds an op result; `backward` runs only if some input requires grad.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Reverse sweep from a 1x1 output.
void backward(const Var& output);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// a + bias, bias is 1 x cols broadcast over rows.
Var add_row(const Var& a, const Var& bias);
/// diag(coeff) * a with a constant per-row coefficient.
Var row_scale(const Var& a, const Vector& coeff);
Var silu(const Var& a);
/// Per-row standardization without affine parameters.
Var layer_norm(const Var& a, double eps = 1e-5);
Var gather_rows(const Var& table, std::span<const int> index);
/// Reinterprets the row-major buffer with a new shape.
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
/// Single-head attention of each query row over `tokens` key/value rows stored
/// contiguously: keys/values are n x (tokens * d), queries n x d.
Var attend(const Var& queries, const Var& keys, const Var& values, int tokens);
Var square(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
/// Mean over rows of -log softmax(logits)[label].
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);
/// 3x3 convolution, stride 1, zero padding 1. x is n x (cin*h*w) in CHW order,
/// weight is cout x (cin*9), bias 1 x cout.
Var conv3x3(const Var& x, const Var& weight, const Var& bias, int cin, int h, int w);
/// Nearest-neighbour 2x upsampling of n x (c*h*w) CHW images.
Var upsample2x(const Var& x, int c, int h, int w);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

Tensor softmax_rows(const Tensor& logits);

}  // namespace snaplab::ad
