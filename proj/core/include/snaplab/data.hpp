#pragma once

#include <vector>

#include "snaplab/tensor.hpp"

namespace snaplab {

/// Clean samples with their condition labels.
struct Batch {
  Tensor x;
  std::vector<int> labels;
};

/// Source of conditional training data.
class DataSource {
 public:
  virtual ~DataSource() = default;
  /// Draws n samples; labels uniform over the classes.
  virtual Batch draw(Eigen::Index n, Rng& rng) const = 0;
  virtual int num_classes() const = 0;
  virtual Eigen::Index dim() const = 0;
};

}  // namespace snaplab
