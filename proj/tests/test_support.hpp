#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "vea/rng.hpp"
#include "vea/tensor.hpp"

namespace vea::test {

/// Central-difference gradient oracle, independent of the tape: evaluates the
/// scalar loss twice per coordinate with the input perturbed by +-h.
inline std::vector<double> finite_difference_gradient(
    const std::function<double(const Tensor&)>& loss, const Tensor& x,
    double h = 1e-5) {
  std::vector<double> grad(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor plus = x.clone();
    plus.mutable_data()[i] += h;
    Tensor minus = x.clone();
    minus.mutable_data()[i] -= h;
    grad[static_cast<size_t>(i)] = (loss(plus) - loss(minus)) / (2.0 * h);
  }
  return grad;
}

/// max_i |a_i - b_i| / max(1, |b_i|)  -- relative where values are large,
/// absolute near zero.
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double scale = std::max(1.0, std::fabs(b[i]));
    worst = std::max(worst, std::fabs(a[i] - b[i]) / scale);
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  int64_t n = shape_numel(shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_vector(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> to_vector(const Tensor& t) {
  return std::vector<double>(t.data(), t.data() + t.numel());
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (std::bit_cast<uint64_t>(pa[i]) != std::bit_cast<uint64_t>(pb[i])) return false;
  }
  return true;
}

}  // namespace vea::test
