#include "snaplab/schedule.hpp"

#include <cmath>
#include <numbers>

#include "snaplab/error.hpp"

namespace snaplab {

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("diffusion time " + std::to_string(t) + " outside [0, 1]");
}

NoiseSchedule NoiseSchedule::from_name(const std::string& name) {
  if (name == "cosine") return cosine();
  throw DomainError("unknown noise schedule '" + name + "'");
}

std::string NoiseSchedule::name() const { return "cosine"; }

AlphaSigma NoiseSchedule::at(double t) const {
  check_time(t);
  // Exact endpoints; cos(pi/2) is 6e-17 in floating point.
  if (t == 0.0) return {1.0, 0.0};
  if (t == 1.0) return {0.0, 1.0};
  const double angle = 0.5 * std::numbers::pi * t;
  return {std::cos(angle), std::sin(angle)};
}

void NoiseSchedule::at(const Vector& t, Vector& alpha, Vector& sigma) const {
  alpha.resize(t.size());
  sigma.resize(t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const AlphaSigma as = at(t(i));
    alpha(i) = as.alpha;
    sigma(i) = as.sigma;
  }
}

std::string to_string(PredictionKind kind) {
  switch (kind) {
    case PredictionKind::Epsilon:
      return "epsilon";
    case PredictionKind::V:
      return "v";
    case PredictionKind::X:
      return "x";
  }
  return "?";
}

PredictionKind prediction_kind_from_string(const std::string& s) {
  if (s == "epsilon" || s == "eps") return PredictionKind::Epsilon;
  if (s == "v") return PredictionKind::V;
  if (s == "x") return PredictionKind::X;
  throw DomainError("unknown parameterization '" + s + "'");
}

LatentState LatentState::uniform(Tensor z, double t) {
  check_time(t);
  LatentState s;
  s.t = Vector::Constant(z.rows(), t);
  s.z = std::move(z);
  return s;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace

LatentState diffuse(const NoiseSchedule& schedule, const Tensor& x, const Tensor& eps, double t) {
  return diffuse(schedule, x, eps, Vector::Constant(x.rows(), t));
}

LatentState diffuse(const NoiseSchedule& schedule, const Tensor& x, const Tensor& eps, const Vector& t) {
  require_same_shape(x, eps, "diffuse");
  if (t.size() != x.rows()) throw ShapeError("diffuse: one time per row required");
  Vector a, s;
  schedule.at(t, a, s);
  LatentState out;
  out.z = a.asDiagonal() * x + s.asDiagonal() * eps;
  out.t = t;
  return out;
}

Prediction v_from_x_eps(const NoiseSchedule& schedule, const Tensor& x, const Tensor& eps, double t) {
  return v_from_x_eps(schedule, x, eps, Vector::Constant(x.rows(), t));
}

Prediction v_from_x_eps(const NoiseSchedule& schedule, const Tensor& x, const Tensor& eps, const Vector& t) {
  require_same_shape(x, eps, "v_from_x_eps");
  if (t.size() != x.rows()) throw ShapeError("v_from_x_eps: one time per row required");
  Vector a, s;
  schedule.at(t, a, s);
  return {PredictionKind::V, a.asDiagonal() * eps - s.asDiagonal() * x};
}

Prediction convert(const NoiseSchedule& schedule, const Prediction& pred, const LatentState& z, PredictionKind target) {
  require_same_shape(pred.value, z.z, "convert");
  if (z.t.size() != z.z.rows()) throw ShapeError("convert: one time per row required");
  if (pred.kind == target) return pred;

  Vector a, s;
  schedule.at(z.t, a, s);
  auto require_nonsingular = [](const Vector& c, const char* name, PredictionKind from, PredictionKind to) {
    if ((c.array() <= kSingularTolerance).any())
      throw SingularityError("convert " + to_string(from) + " -> " + to_string(to) + ": " + name +
                             "_t vanishes at this time");
  };

  const Tensor& p = pred.value;
  Prediction out{target, Tensor()};
  switch (pred.kind) {
    case PredictionKind::V:
      out.value = target == PredictionKind::X ? Tensor(a.asDiagonal() * z.z - s.asDiagonal() * p)
                                              : Tensor(s.asDiagonal() * z.z + a.asDiagonal() * p);
      break;
    case PredictionKind::Epsilon: {
      require_nonsingular(a, "alpha", pred.kind, target);
      const Vector inv_a = a.cwiseInverse();
      out.value = target == PredictionKind::X ? Tensor(inv_a.asDiagonal() * (z.z - s.asDiagonal() * p))
                                              : Tensor(inv_a.asDiagonal() * (p - s.asDiagonal() * z.z));
      break;
    }
    case PredictionKind::X: {
      require_nonsingular(s, "sigma", pred.kind, target);
      const Vector inv_s = s.cwiseInverse();
      out.value = target == PredictionKind::Epsilon ? Tensor(inv_s.asDiagonal() * (z.z - a.asDiagonal() * p))
                                                    : Tensor(inv_s.asDiagonal() * (a.asDiagonal() * z.z - p));
      break;
    }
  }
  return out;
}

}  // namespace snaplab
