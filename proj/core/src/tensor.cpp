#include "snaplab/tensor.hpp"

#include <cmath>
#include <cstdio>

namespace snaplab {

Tensor Rng::normal(Eigen::Index rows, Eigen::Index cols) {
  Tensor out(rows, cols);
  double* p = out.data();
  for (Eigen::Index i = 0; i < out.size(); ++i) p[i] = normal_(engine_);
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

bool all_finite(const Tensor& t) { return t.allFinite(); }

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t checksum(std::span<const Tensor* const> tensors) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const Tensor* t : tensors) {
    const std::int64_t shape[2] = {t->rows(), t->cols()};
    h = fnv1a({reinterpret_cast<const char*>(shape), sizeof(shape)}, h);
    h = fnv1a({reinterpret_cast<const char*>(t->data()), static_cast<std::size_t>(t->size()) * sizeof(double)}, h);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace snaplab
