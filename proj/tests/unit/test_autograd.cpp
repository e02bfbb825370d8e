#include <gtest/gtest.h>

#include <cmath>

#include "snaplab/autograd.hpp"
#include "snaplab/error.hpp"
#include "test_util.hpp"

namespace snaplab {
namespace {

using ad::Var;
using testing::max_gradient_error;

// Contract any op output to a scalar with fixed random weights so every output
// element contributes a distinct gradient.
struct Contract {
  Tensor weights;
  Var operator()(const Var& y) const { return ad::sum(ad::mul(y, Var::constant(weights))); }
};

Contract contract_for(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  return {rng.normal(rows, cols)};
}

constexpr double kTol = 1e-6;

TEST(Autograd, MatmulGradients) {
  Rng rng(1);
  const Tensor a = rng.normal(4, 3), b = rng.normal(3, 5);
  const Contract c = contract_for(4, 5, 2);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::matmul(x, Var::constant(b))); }, a), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::matmul(Var::constant(a), x)); }, b), kTol);
}

TEST(Autograd, ElementwiseGradients) {
  Rng rng(3);
  const Tensor a = rng.normal(3, 4), b = rng.normal(3, 4);
  const Contract c = contract_for(3, 4, 4);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::mul(x, Var::constant(b))); }, a), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::sub(Var::constant(b), x)); }, a), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::silu(x)); }, a), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::square(x)); }, a), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return ad::mean(ad::scale(x, -2.5)); }, a), kTol);
}

TEST(Autograd, BroadcastAndRowOps) {
  Rng rng(5);
  const Tensor a = rng.normal(4, 3), bias = rng.normal(1, 3);
  Vector coeff(4);
  coeff << 0.5, -1.0, 2.0, 3.0;
  const Contract c = contract_for(4, 3, 6);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::add_row(Var::constant(a), x)); }, bias), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::row_scale(x, coeff)); }, a), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::layer_norm(x)); }, a), 1e-5);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return contract_for(2, 6, 7)(ad::reshape(x, 2, 6)); }, a), kTol);
}

TEST(Autograd, GatherRowsAccumulatesRepeatedIndices) {
  Rng rng(8);
  const Tensor table = rng.normal(3, 4);
  const std::vector<int> idx{2, 0, 2, 2};
  const Contract c = contract_for(4, 4, 9);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::gather_rows(x, idx)); }, table), kTol);
}

TEST(Autograd, SoftmaxCrossEntropyValueAndGradient) {
  Tensor logits(2, 3);
  logits << 1.0, 2.0, 3.0, 0.0, 0.0, 0.0;
  const std::vector<int> labels{2, 1};
  const double row0 = -(3.0 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  const double row1 = std::log(3.0);
  EXPECT_NEAR(ad::softmax_cross_entropy(Var::constant(logits), labels).item(), 0.5 * (row0 + row1), 1e-14);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return ad::softmax_cross_entropy(x, labels); }, logits), kTol);
}

// Direct per-row oracle: softmax over tokens of q.k_j / sqrt(d), then the
// weighted sum of value vectors.
TEST(Autograd, AttentionMatchesLoopOracle) {
  const int tokens = 3, d = 4, n = 2;
  Rng rng(10);
  const Tensor q = rng.normal(n, d), k = rng.normal(n, tokens * d), v = rng.normal(n, tokens * d);
  const Tensor out = ad::attend(Var::constant(q), Var::constant(k), Var::constant(v), tokens).value();
  for (int i = 0; i < n; ++i) {
    double s[tokens], z = 0.0;
    for (int j = 0; j < tokens; ++j) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += q(i, c) * k(i, j * d + c);
      s[j] = std::exp(dot / std::sqrt(static_cast<double>(d)));
      z += s[j];
    }
    for (int c = 0; c < d; ++c) {
      double want = 0.0;
      for (int j = 0; j < tokens; ++j) want += s[j] / z * v(i, j * d + c);
      EXPECT_NEAR(out(i, c), want, 1e-12);
    }
  }
  const Contract c = contract_for(n, d, 11);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::attend(x, Var::constant(k), Var::constant(v), tokens)); }, q), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::attend(Var::constant(q), x, Var::constant(v), tokens)); }, k), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& x) { return c(ad::attend(Var::constant(q), Var::constant(k), x, tokens)); }, v), kTol);
}

TEST(Autograd, AttentionShapeMismatchThrows) {
  const Tensor q = Tensor::Zero(2, 4), k = Tensor::Zero(2, 7);
  EXPECT_THROW(ad::attend(Var::constant(q), Var::constant(k), Var::constant(k), 2), ShapeError);
}

// Naive zero-padded 3x3 convolution.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int cin, int h, int wd) {
  const int cout = static_cast<int>(w.rows());
  Tensor out = Tensor::Zero(x.rows(), cout * h * wd);
  for (Eigen::Index n = 0; n < x.rows(); ++n)
    for (int o = 0; o < cout; ++o)
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < wd; ++xx) {
          double acc = b(0, o);
          for (int c = 0; c < cin; ++c)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int sy = yy + dy, sx = xx + dx;
                if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
                acc += w(o, c * 9 + (dy + 1) * 3 + (dx + 1)) * x(n, c * h * wd + sy * wd + sx);
              }
          out(n, o * h * wd + yy * wd + xx) = acc;
        }
  return out;
}

TEST(Autograd, Conv3x3MatchesLoopOracle) {
  const int cin = 2, cout = 3, h = 4, w = 5;
  Rng rng(12);
  const Tensor x = rng.normal(2, cin * h * w), wt = rng.normal(cout, cin * 9), b = rng.normal(1, cout);
  const Tensor got = ad::conv3x3(Var::constant(x), Var::constant(wt), Var::constant(b), cin, h, w).value();
  EXPECT_LT((got - conv_oracle(x, wt, b, cin, h, w)).cwiseAbs().maxCoeff(), 1e-12);

  const Contract c = contract_for(2, cout * h * w, 13);
  EXPECT_LT(max_gradient_error([&](const Var& v) { return c(ad::conv3x3(v, Var::constant(wt), Var::constant(b), cin, h, w)); }, x), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& v) { return c(ad::conv3x3(Var::constant(x), v, Var::constant(b), cin, h, w)); }, wt), kTol);
  EXPECT_LT(max_gradient_error([&](const Var& v) { return c(ad::conv3x3(Var::constant(x), Var::constant(wt), v, cin, h, w)); }, b), kTol);
}

TEST(Autograd, UpsampleRepeatsPixels) {
  Tensor x(1, 2 * 2 * 2);
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  const Tensor y = ad::upsample2x(Var::constant(x), 2, 2, 2).value();
  ASSERT_EQ(y.cols(), 2 * 4 * 4);
  for (int c = 0; c < 2; ++c)
    for (int yy = 0; yy < 4; ++yy)
      for (int xx = 0; xx < 4; ++xx) EXPECT_EQ(y(0, c * 16 + yy * 4 + xx), x(0, c * 4 + (yy / 2) * 2 + xx / 2));
  const Contract c = contract_for(1, 32, 14);
  EXPECT_LT(max_gradient_error([&](const Var& v) { return c(ad::upsample2x(v, 2, 2, 2)); }, x), kTol);
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
  Var x = Var::leaf(Tensor::Constant(1, 1, 3.0));
  ad::backward(ad::add(ad::square(x), ad::scale(x, 2.0)));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 2 * 3.0 + 2.0);
  ad::backward(ad::scale(x, 1.0));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 9.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 0.0);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Var x = Var::leaf(Tensor::Constant(2, 2, 1.0));
  {
    ad::NoGradGuard guard;
    EXPECT_FALSE(ad::grad_enabled());
    EXPECT_FALSE(ad::square(x).requires_grad());
  }
  EXPECT_TRUE(ad::grad_enabled());
  EXPECT_TRUE(ad::square(x).requires_grad());
}

}  // namespace
}  // namespace snaplab
