#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>

#include "snaplab/autograd.hpp"

namespace snaplab::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("snaplab-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

/// Sets an environment variable for the lifetime of the guard.
class EnvGuard {
 public:
  EnvGuard(const char* name, const std::string& value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old, had_ = true;
    ::setenv(name, value.c_str(), 1);
  }
  ~EnvGuard() {
    if (had_)
      ::setenv(name_, old_.c_str(), 1);
    else
      ::unsetenv(name_);
  }

 private:
  const char* name_;
  std::string old_;
  bool had_ = false;
};

/// Largest relative error between the analytic gradient of `f` at `x` and a
/// central difference with step h, floored by `abs_floor` in the denominator.
inline double max_gradient_error(const std::function<ad::Var(const ad::Var&)>& f, const Tensor& x, double h = 1e-6,
                                 double abs_floor = 1e-8) {
  ad::Var leaf = ad::Var::leaf(x);
  ad::backward(f(leaf));
  const Tensor analytic = leaf.grad();
  double worst = 0.0;
  Tensor probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = probe.data()[i];
    probe.data()[i] = keep + h;
    const double up = f(ad::Var::constant(probe)).item();
    probe.data()[i] = keep - h;
    const double down = f(ad::Var::constant(probe)).item();
    probe.data()[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic.data()[i]), abs_floor});
    worst = std::max(worst, std::abs(numeric - analytic.data()[i]) / denom);
  }
  return worst;
}

}  // namespace snaplab::testing
