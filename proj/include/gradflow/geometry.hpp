#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "gradflow/error.hpp"
#include "gradflow/tensor.hpp"

// Sliding-window geometry shared by maxpool and convolution: output
// resolution arithmetic, patch enumeration, explicit zero padding (external
// and internal), im2col, kernel unroll/roll and the forward->backward
// sampling transform behind fractionally strided convolution.

namespace gradflow {

// p = (kernel size, stride, padding), all in cells.
struct SamplingTriplet {
  std::size_t k = 1;
  std::size_t s = 1;
  std::size_t p = 0;

  std::string str() const {
    return "(k=" + std::to_string(k) + ",s=" + std::to_string(s) + ",p=" + std::to_string(p) +
           ")";
  }
};

// Backward counterpart of a forward triplet: unit stride, flipped padding,
// plus internal zero-fill between adjacent error cells.
struct BackwardSampling {
  SamplingTriplet base;       // (k, 1, k - p - 1)
  std::size_t internal_gap = 0;  // s_forward - 1
};

inline void require_valid_window(std::size_t r_in, const SamplingTriplet& p, const char* op) {
  if (p.k < 1 || p.s < 1) {
    throw GeometryError(std::string(op) + ": degenerate sampling " + p.str());
  }
  if (r_in + 2 * p.p < p.k) {
    throw GeometryError(std::string(op) + ": no window fits, r_in=" + std::to_string(r_in) +
                        " with " + p.str());
  }
}

// floor((r + 2p - k)/s) + 1
inline std::size_t out_resolution(std::size_t r_in, const SamplingTriplet& p) {
  require_valid_window(r_in, p, "out_resolution");
  return (r_in + 2 * p.p - p.k) / p.s + 1;
}

// True when the window tiling covers the padded canvas with no dropped
// trailing cells; the fractional-stride backward pass requires this.
inline bool exact_fit(std::size_t r_in, const SamplingTriplet& p) {
  require_valid_window(r_in, p, "exact_fit");
  return (r_in + 2 * p.p - p.k) % p.s == 0;
}

// Patch origins (row, col) in padded coordinates, row-major over the output
// grid. Each patch spans k x k cells starting at its origin.
inline std::vector<std::pair<std::size_t, std::size_t>> enumerate_patches(
    std::size_t r_in, const SamplingTriplet& p) {
  const std::size_t r_out = out_resolution(r_in, p);
  std::vector<std::pair<std::size_t, std::size_t>> origins;
  origins.reserve(r_out * r_out);
  for (std::size_t oi = 0; oi < r_out; ++oi) {
    for (std::size_t oj = 0; oj < r_out; ++oj) {
      origins.emplace_back(oi * p.s, oj * p.s);
    }
  }
  return origins;
}

// Explicit zero-filled canvas; padding is materialized, never simulated by
// index arithmetic.
inline Tensor4 pad_spatial(const Tensor4& a, std::size_t pad) {
  if (pad == 0) return a;
  Tensor4 out(a.n, a.d, a.h + 2 * pad, a.w + 2 * pad);
  for (std::size_t s = 0; s < a.n; ++s) {
    for (std::size_t c = 0; c < a.d; ++c) {
      for (std::size_t i = 0; i < a.h; ++i) {
        for (std::size_t j = 0; j < a.w; ++j) {
          out(s, c, i + pad, j + pad) = a(s, c, i, j);
        }
      }
    }
  }
  return out;
}

// im2col: every k x k x d patch becomes one column.
//
// Row order is (depth, kernel row, kernel col) = (c*k + u)*k + v, matching
// the memory order of an unrolled kernel. Column order is the frozen f2d
// space-sample enumeration q = (oi*r_out + oj)*n + s, so a GEMM against the
// unrolled kernels folds straight back with f4d.
inline Matrix im2col(const Tensor4& a, const SamplingTriplet& p) {
  const std::size_t r_in = a.r();
  const std::size_t r_out = out_resolution(r_in, p);
  const Tensor4 padded = pad_spatial(a, p.p);
  Matrix out(a.d * p.k * p.k, r_out * r_out * a.n);
  for (std::size_t s = 0; s < a.n; ++s) {
    for (std::size_t oi = 0; oi < r_out; ++oi) {
      for (std::size_t oj = 0; oj < r_out; ++oj) {
        const std::size_t q = (oi * r_out + oj) * a.n + s;
        for (std::size_t c = 0; c < a.d; ++c) {
          for (std::size_t u = 0; u < p.k; ++u) {
            for (std::size_t v = 0; v < p.k; ++v) {
              out((c * p.k + u) * p.k + v, q) = padded(s, c, oi * p.s + u, oj * p.s + v);
            }
          }
        }
      }
    }
  }
  return out;
}

// Kernel bank [d_out x d_in x k x k] -> [d_out x (d_in*k*k)]. Because the
// bank is stored row-major this is a straight reshape, and the row layout
// matches the im2col row order by construction.
inline Matrix unroll_kernels(const Tensor4& w) {
  Matrix out(w.n, w.d * w.h * w.w);
  out.data = w.data;
  return out;
}

inline Tensor4 roll_kernels(const Matrix& m, std::size_t d_out, std::size_t d_in,
                            std::size_t k) {
  if (m.rows != d_out || m.cols != d_in * k * k) {
    throw ShapeError("roll_kernels: matrix " + m.shape_str() + " does not roll to " +
                     std::to_string(d_out) + "x" + std::to_string(d_in) + "x" +
                     std::to_string(k) + "x" + std::to_string(k));
  }
  Tensor4 out(d_out, d_in, k, k);
  out.data = m.data;
  return out;
}

// Forward triplet -> backward sampling: s' = 1, p' = k - p - 1, with
// s_forward - 1 cells of internal zero-fill in the error map.
inline BackwardSampling backward_sampling(const SamplingTriplet& fwd) {
  if (fwd.p + 1 > fwd.k) {
    throw GeometryError("backward_sampling: derived padding k-p-1 negative for " + fwd.str());
  }
  BackwardSampling back;
  back.base = SamplingTriplet{fwd.k, 1, fwd.k - fwd.p - 1};
  back.internal_gap = fwd.s - 1;
  return back;
}

// Internal (fractional-stride) zero-fill: r -> r + (r-1)*gap with the
// original values at stride gap+1.
inline Tensor4 dilate_internal(const Tensor4& delta, std::size_t gap) {
  if (gap == 0) return delta;
  const std::size_t r_in = delta.r();
  const std::size_t r_out = r_in + (r_in - 1) * gap;
  Tensor4 out(delta.n, delta.d, r_out, r_out);
  const std::size_t step = gap + 1;
  for (std::size_t s = 0; s < delta.n; ++s) {
    for (std::size_t c = 0; c < delta.d; ++c) {
      for (std::size_t i = 0; i < r_in; ++i) {
        for (std::size_t j = 0; j < r_in; ++j) {
          out(s, c, i * step, j * step) = delta(s, c, i, j);
        }
      }
    }
  }
  return out;
}

// Swap the two depth dimensions of a kernel bank and rotate each k x k
// window by 180 degrees: out[ci][co][i][j] = w[co][ci][k-1-i][k-1-j].
inline Tensor4 rot180_transpose_depth(const Tensor4& w) {
  Tensor4 out(w.d, w.n, w.h, w.w);
  for (std::size_t co = 0; co < w.n; ++co) {
    for (std::size_t ci = 0; ci < w.d; ++ci) {
      for (std::size_t i = 0; i < w.h; ++i) {
        for (std::size_t j = 0; j < w.w; ++j) {
          out(ci, co, i, j) = w(co, ci, w.h - 1 - i, w.w - 1 - j);
        }
      }
    }
  }
  return out;
}

}  // namespace gradflow
