#pragma once

#include <random>

#include "tsar/tensor.hpp"

namespace tsar::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Values kept at least `gap` away from zero, for inputs to relu.
inline Tensor random_off_zero(Shape shape, std::mt19937_64& rng, double gap = 0.05) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (auto& v : t.data()) v = v >= 0 ? v + gap : v - gap;
  return t;
}

}  // namespace tsar::test
