#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

#include <Eigen/Dense>

namespace snaplab {

/// Row-major dense matrix; one sample per row.
using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Seeded random source. Every stochastic routine takes one of these (or a seed)
/// so runs are reproducible bit-for-bit on a given toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }
  Tensor normal(Eigen::Index rows, Eigen::Index cols);
  std::uint64_t next_seed() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// splitmix64 mixing of (seed, stream); used to give sub-tasks independent streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

bool all_finite(const Tensor& t);

/// FNV-1a over the raw bytes of the tensors (shape included).
std::uint64_t checksum(std::span<const Tensor* const> tensors);
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 14695981039346656037ULL);

std::string hex64(std::uint64_t v);

}  // namespace snaplab
