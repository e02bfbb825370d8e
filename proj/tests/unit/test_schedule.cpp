#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "snaplab/error.hpp"
#include "snaplab/schedule.hpp"

namespace snaplab {
namespace {

const NoiseSchedule kCos = NoiseSchedule::cosine();

TEST(Schedule, CosineValues) {
  for (double t : {0.0, 0.1, 0.25, 0.5, 0.9, 1.0}) {
    const auto [a, s] = kCos.at(t);
    EXPECT_NEAR(a, std::cos(std::numbers::pi * t / 2), 1e-15);
    EXPECT_NEAR(s, std::sin(std::numbers::pi * t / 2), 1e-15);
    EXPECT_NEAR(a * a + s * s, 1.0, 1e-15);
  }
  EXPECT_EQ(kCos.at(0.0).alpha, 1.0);
  EXPECT_EQ(kCos.at(0.0).sigma, 0.0);
}

TEST(Schedule, AlphaDecreasesMonotonically) {
  double prev = 2.0;
  for (int i = 0; i <= 100; ++i) {
    const double a = kCos.at(i / 100.0).alpha;
    EXPECT_LT(a, prev);
    prev = a;
  }
}

TEST(Schedule, RejectsTimesOutsideUnitInterval) {
  EXPECT_THROW(kCos.at(-1e-9), DomainError);
  EXPECT_THROW(kCos.at(1.0 + 1e-9), DomainError);
  EXPECT_THROW(kCos.at(std::numeric_limits<double>::quiet_NaN()), DomainError);
}

TEST(Schedule, NamesRoundTrip) {
  EXPECT_EQ(NoiseSchedule::from_name("cosine").name(), "cosine");
  EXPECT_THROW(NoiseSchedule::from_name("linear-ish"), Error);
  EXPECT_EQ(prediction_kind_from_string(to_string(PredictionKind::Epsilon)), PredictionKind::Epsilon);
  EXPECT_EQ(prediction_kind_from_string(to_string(PredictionKind::V)), PredictionKind::V);
  EXPECT_EQ(prediction_kind_from_string(to_string(PredictionKind::X)), PredictionKind::X);
}

TEST(Schedule, DiffuseAndVelocityFormulas) {
  Rng rng(1);
  const Tensor x = rng.normal(6, 3), eps = rng.normal(6, 3);
  const double t = 0.37;
  const double a = std::cos(std::numbers::pi * t / 2), s = std::sin(std::numbers::pi * t / 2);
  const LatentState z = diffuse(kCos, x, eps, t);
  EXPECT_LT((z.z - (a * x + s * eps)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(z.t.size(), 6);
  const Prediction v = v_from_x_eps(kCos, x, eps, t);
  EXPECT_EQ(v.kind, PredictionKind::V);
  EXPECT_LT((v.value - (a * eps - s * x)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Schedule, PerRowTimes) {
  Rng rng(2);
  const Tensor x = rng.normal(3, 2), eps = rng.normal(3, 2);
  Vector t(3);
  t << 0.0, 0.5, 1.0;
  const LatentState z = diffuse(kCos, x, eps, t);
  EXPECT_EQ(z.z.row(0), x.row(0));
  EXPECT_NEAR((z.z.row(2) - eps.row(2)).cwiseAbs().maxCoeff(), 0.0, 1e-15);
}

// Every parameterization built directly from the known (x, eps) must be
// reachable from every other one.
TEST(Schedule, ConversionsAgreeWithDirectConstruction) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double t = rng.uniform(0.01, 0.99);
    const Tensor x = rng.normal(4, 3), eps = rng.normal(4, 3);
    const LatentState z = diffuse(kCos, x, eps, t);
    const Prediction px{PredictionKind::X, x};
    const Prediction pe{PredictionKind::Epsilon, eps};
    const Prediction pv = v_from_x_eps(kCos, x, eps, t);
    for (const Prediction* from : {&px, &pe, &pv}) {
      EXPECT_LT((convert(kCos, *from, z, PredictionKind::X).value - x).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_LT((convert(kCos, *from, z, PredictionKind::Epsilon).value - eps).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_LT((convert(kCos, *from, z, PredictionKind::V).value - pv.value).cwiseAbs().maxCoeff(), 1e-9);
    }
  }
}

TEST(Schedule, ConversionIdentityIsExact) {
  Rng rng(4);
  const Tensor x = rng.normal(2, 2), eps = rng.normal(2, 2);
  const LatentState z = diffuse(kCos, x, eps, 0.3);
  const Prediction v = v_from_x_eps(kCos, x, eps, 0.3);
  EXPECT_EQ(convert(kCos, v, z, PredictionKind::V).value, v.value);
}

TEST(Schedule, SingularConversionsThrow) {
  Rng rng(5);
  const Tensor x = rng.normal(2, 2), eps = rng.normal(2, 2);
  // sigma = 0: x -> eps divides by sigma.
  const LatentState z0 = diffuse(kCos, x, eps, 0.0);
  EXPECT_THROW(convert(kCos, {PredictionKind::X, x}, z0, PredictionKind::Epsilon), SingularityError);
  // alpha ~ 6e-17 at t = 1: eps -> x divides by alpha.
  const LatentState z1 = diffuse(kCos, x, eps, 1.0);
  EXPECT_THROW(convert(kCos, {PredictionKind::Epsilon, eps}, z1, PredictionKind::X), SingularityError);
  // v -> x never divides and stays finite at both ends.
  const Prediction v0 = v_from_x_eps(kCos, x, eps, 0.0);
  EXPECT_LT((convert(kCos, v0, z0, PredictionKind::X).value - x).cwiseAbs().maxCoeff(), 1e-15);
  const Prediction v1 = v_from_x_eps(kCos, x, eps, 1.0);
  EXPECT_LT((convert(kCos, v1, z1, PredictionKind::Epsilon).value - eps).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Schedule, ShapeMismatchThrows) {
  const Tensor x = Tensor::Zero(2, 2), eps = Tensor::Zero(3, 2);
  EXPECT_THROW(diffuse(kCos, x, eps, 0.5), ShapeError);
}

}  // namespace
}  // namespace snaplab
