#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gradflow/error.hpp"

// Dense row-major arrays (rank 1, 2 and 4) and the handful of products and
// broadcast/contraction rules everything else is written in terms of.
// All scalars are 64-bit floats and every reduction runs in ascending index
// order, so identical inputs give bit-identical outputs.

namespace gradflow {

using Vector = std::vector<double>;

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::size_t size() const { return data.size(); }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// Minibatch image data, layout (sample, depth, row, col) row-major.
struct Tensor4 {
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> data;

  Tensor4() = default;
  Tensor4(std::size_t n_, std::size_t d_, std::size_t h_, std::size_t w_, double fill = 0.0)
      : n(n_), d(d_), h(h_), w(w_), data(n_ * d_ * h_ * w_, fill) {}

  double& operator()(std::size_t s, std::size_t c, std::size_t i, std::size_t j) {
    return data[((s * d + c) * h + i) * w + j];
  }
  double operator()(std::size_t s, std::size_t c, std::size_t i, std::size_t j) const {
    return data[((s * d + c) * h + i) * w + j];
  }
  std::size_t size() const { return data.size(); }

  // The pipeline only deals in square images.
  std::size_t r() const {
    if (h != w) {
      throw ShapeError("tensor is not spatially square: " + shape_str());
    }
    return h;
  }

  std::string shape_str() const {
    return std::to_string(n) + "x" + std::to_string(d) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
  bool same_shape(const Tensor4& o) const {
    return n == o.n && d == o.d && h == o.h && w == o.w;
  }
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": " + a.shape_str() + " vs " + b.shape_str());
  }
}

inline void require_same_shape(const Tensor4& a, const Tensor4& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": " + a.shape_str() + " vs " + b.shape_str());
  }
}

// Standard matrix product. The i-k-j loop order keeps the per-cell
// accumulation strictly ascending in k.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: " + a.shape_str() + " incompatible with " + b.shape_str());
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = &a.data[i * a.cols];
    double* orow = &out.data[i * out.cols];
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = &b.data[k * b.cols];
      for (std::size_t j = 0; j < b.cols; ++j) {
        orow[j] += aik * brow[j];
      }
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) {
      out(j, i) = a(i, j);
    }
  }
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  return out;
}

inline Tensor4 hadamard(const Tensor4& a, const Tensor4& b) {
  require_same_shape(a, b, "hadamard");
  Tensor4 out(a.n, a.d, a.h, a.w);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  return out;
}

// Sum of the entries of the Hadamard product.
inline double frobenius(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "frobenius");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

inline double frobenius(const Tensor4& a, const Tensor4& b) {
  require_same_shape(a, b, "frobenius");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

// Per-row dot product of two stacks of feature vectors.
inline Vector feature_dot(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "feature_dot");
  Vector out(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) acc += a(i, j) * b(i, j);
    out[i] = acc;
  }
  return out;
}

// a + b with b replicated over the sample rows.
inline Matrix broadcast_add_bias(const Matrix& a, const Vector& b) {
  if (b.size() != a.cols) {
    throw ShapeError("broadcast_add_bias: bias length " + std::to_string(b.size()) +
                     " vs " + std::to_string(a.cols) + " columns");
  }
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) out(i, j) += b[j];
  }
  return out;
}

// Depth-indexed bias replicated over samples and both spatial dims.
inline Tensor4 broadcast_add_bias(const Tensor4& a, const Vector& b) {
  if (b.size() != a.d) {
    throw ShapeError("broadcast_add_bias: bias length " + std::to_string(b.size()) +
                     " vs depth " + std::to_string(a.d));
  }
  Tensor4 out = a;
  for (std::size_t s = 0; s < a.n; ++s) {
    for (std::size_t c = 0; c < a.d; ++c) {
      const double bc = b[c];
      for (std::size_t i = 0; i < a.h; ++i) {
        for (std::size_t j = 0; j < a.w; ++j) out(s, c, i, j) += bc;
      }
    }
  }
  return out;
}

// Reverts the 2-d additive broadcast: sum over samples.
inline Vector contract_bias(const Matrix& delta) {
  Vector out(delta.cols, 0.0);
  for (std::size_t i = 0; i < delta.rows; ++i) {
    for (std::size_t j = 0; j < delta.cols; ++j) out[j] += delta(i, j);
  }
  return out;
}

// Reverts the 4-d additive broadcast: sum over samples and space.
inline Vector contract_bias_4d(const Tensor4& delta) {
  Vector out(delta.d, 0.0);
  for (std::size_t s = 0; s < delta.n; ++s) {
    for (std::size_t c = 0; c < delta.d; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < delta.h; ++i) {
        for (std::size_t j = 0; j < delta.w; ++j) acc += delta(s, c, i, j);
      }
      out[c] += acc;
    }
  }
  return out;
}

// Column j scaled by w[j]; equivalent to a * diag(w) without forming the
// diagonal matrix.
inline Matrix diag_broadcast_mul(const Matrix& a, const Vector& w) {
  if (w.size() != a.cols) {
    throw ShapeError("diag_broadcast_mul: weight length " + std::to_string(w.size()) +
                     " vs " + std::to_string(a.cols) + " columns");
  }
  Matrix out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) out(i, j) = a(i, j) * w[j];
  }
  return out;
}

// Shape-conversion maps between 4-d image form and 2-d feature form.
//
// The enumeration is frozen across the whole project (im2col and batch
// normalization must agree on it): tensor cell (s, c, i, j) maps to the
// flattened space-sample index q = (i*r + j)*n + s, i.e. spatial row-major
// first, then sample.
//
//   f2d   : [n x d x r x r] -> [d x (r*r*n)]   entry (c, q)
//   f2d_t : [n x d x r x r] -> [(r*r*n) x d]   entry (q, c)
//
// f4d / f4d_t are the exact inverses.

inline Matrix f2d(const Tensor4& a) {
  const std::size_t r = a.r();
  Matrix out(a.d, r * r * a.n);
  for (std::size_t s = 0; s < a.n; ++s) {
    for (std::size_t c = 0; c < a.d; ++c) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
          out(c, (i * r + j) * a.n + s) = a(s, c, i, j);
        }
      }
    }
  }
  return out;
}

inline Matrix f2d_t(const Tensor4& a) {
  const std::size_t r = a.r();
  Matrix out(r * r * a.n, a.d);
  for (std::size_t s = 0; s < a.n; ++s) {
    for (std::size_t c = 0; c < a.d; ++c) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
          out((i * r + j) * a.n + s, c) = a(s, c, i, j);
        }
      }
    }
  }
  return out;
}

inline Tensor4 f4d(const Matrix& m, std::size_t n, std::size_t d, std::size_t r) {
  if (m.rows != d || m.cols != r * r * n) {
    throw ShapeError("f4d: matrix " + m.shape_str() + " does not fold to " +
                     std::to_string(n) + "x" + std::to_string(d) + "x" + std::to_string(r) +
                     "x" + std::to_string(r));
  }
  Tensor4 out(n, d, r, r);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
          out(s, c, i, j) = m(c, (i * r + j) * n + s);
        }
      }
    }
  }
  return out;
}

inline Tensor4 f4d_t(const Matrix& m, std::size_t n, std::size_t d, std::size_t r) {
  if (m.rows != r * r * n || m.cols != d) {
    throw ShapeError("f4d_t: matrix " + m.shape_str() + " does not fold to " +
                     std::to_string(n) + "x" + std::to_string(d) + "x" + std::to_string(r) +
                     "x" + std::to_string(r));
  }
  Tensor4 out(n, d, r, r);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
          out(s, c, i, j) = m((i * r + j) * n + s, c);
        }
      }
    }
  }
  return out;
}

}  // namespace gradflow
