#pragma once

#include <cmath>
#include <cstdint>

#include "gradflow/rng.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow::test {

inline Matrix rand_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0,
                          double hi = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.uniform(lo, hi);
  return m;
}

inline Tensor4 rand_tensor(std::size_t n, std::size_t d, std::size_t r, Rng& rng,
                           double lo = -1.0, double hi = 1.0) {
  Tensor4 t(n, d, r, r);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline Vector rand_vector(std::size_t len, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Vector v(len);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
  }
  return worst;
}

inline double max_abs_diff(const Tensor4& a, const Tensor4& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
  }
  return worst;
}

inline double max_abs_diff(const Vector& a, const Vector& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return worst;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Central difference of a nullary loss around one coordinate, restoring the
// coordinate afterwards.
template <typename LossFn>
double central_diff_at(LossFn&& loss, double& coord, double h = 1e-5) {
  const double orig = coord;
  coord = orig + h;
  const double hi = loss();
  coord = orig - h;
  const double lo = loss();
  coord = orig;
  return (hi - lo) / (2.0 * h);
}

}  // namespace gradflow::test
