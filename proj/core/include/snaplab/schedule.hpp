#pragma once

#include <string>

#include "snaplab/tensor.hpp"

namespace snaplab {

/// Conversions dividing by alpha or sigma refuse values at or below this.
inline constexpr double kSingularTolerance = 1e-6;

struct AlphaSigma {
  double alpha;
  double sigma;
};

/// Variance-preserving schedule: alpha(t)^2 + sigma(t)^2 = 1, alpha(0) = 1, sigma(0) = 0.
/// Only the cosine curve alpha = cos(pi t / 2) is provided.
class NoiseSchedule {
 public:
  enum class Type { Cosine };

  static NoiseSchedule cosine() { return NoiseSchedule(Type::Cosine); }
  /// Parses the `schedule.type` config value.
  static NoiseSchedule from_name(const std::string& name);

  /// Throws DomainError when t is outside [0, 1] or not finite.
  AlphaSigma at(double t) const;
  void at(const Vector& t, Vector& alpha, Vector& sigma) const;

  Type type() const { return type_; }
  std::string name() const;

 private:
  explicit NoiseSchedule(Type type) : type_(type) {}
  Type type_;
};

inline AlphaSigma alpha_sigma(const NoiseSchedule& schedule, double t) { return schedule.at(t); }

enum class PredictionKind { Epsilon, V, X };

std::string to_string(PredictionKind kind);
PredictionKind prediction_kind_from_string(const std::string& s);

/// A model output tagged with its parameterization.
struct Prediction {
  PredictionKind kind = PredictionKind::V;
  Tensor value;
};

/// Noisy latent z with one diffusion time per row.
struct LatentState {
  Tensor z;
  Vector t;

  static LatentState uniform(Tensor z, double t);
  Eigen::Index rows() const { return z.rows(); }
};

void check_time(double t);

/// z = alpha_t x + sigma_t eps.
LatentState diffuse(const NoiseSchedule& schedule, const Tensor& x, const Tensor& eps, double t);
LatentState diffuse(const NoiseSchedule& schedule, const Tensor& x, const Tensor& eps, const Vector& t);

/// v = alpha_t eps - sigma_t x.
Prediction v_from_x_eps(const NoiseSchedule& schedule, const Tensor& x, const Tensor& eps, double t);
Prediction v_from_x_eps(const NoiseSchedule& schedule, const Tensor& x, const Tensor& eps, const Vector& t);

/// Exact change of parameterization at the given noisy latent. Routes that
/// divide by alpha (from EPSILON) or sigma (from X) throw SingularityError
/// when that coefficient is <= kSingularTolerance.
Prediction convert(const NoiseSchedule& schedule, const Prediction& pred, const LatentState& z, PredictionKind target);

}  // namespace snaplab
