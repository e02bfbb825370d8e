#pragma once

#include <vector>

#include "snaplab/autograd.hpp"

namespace snaplab {

/// Trainable tensor with value semantics: copying a Param copies its data into
/// a fresh leaf, so copied models never share storage or gradients.
class Param {
 public:
  Param() = default;
  explicit Param(Tensor init) : var_(ad::Var::leaf(std::move(init))) {}
  Param(const Param& other) : var_(ad::Var::leaf(other.value())) {}
  Param& operator=(const Param& other) {
    if (this != &other) var_ = ad::Var::leaf(other.value());
    return *this;
  }
  Param(Param&&) noexcept = default;
  Param& operator=(Param&&) noexcept = default;

  const ad::Var& var() const { return var_; }
  const Tensor& value() const { return var_.value(); }
  Tensor& value() { return var_.mutable_value(); }
  Tensor grad() const { return var_.grad(); }
  void zero_grad() { var_.zero_grad(); }
  Eigen::Index size() const { return var_.value().size(); }

 private:
  ad::Var var_;
};

struct AdamWOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Holds non-owning pointers; the parameter
/// set must outlive the optimizer and keep a stable address.
class AdamW {
 public:
  AdamW(std::vector<Param*> params, AdamWOptions options);

  void zero_grad();
  void step();
  long steps_taken() const { return step_; }

 private:
  std::vector<Param*> params_;
  std::vector<Tensor> m_, v_;
  AdamWOptions opt_;
  long step_ = 0;
};

}  // namespace snaplab
