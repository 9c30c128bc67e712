#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "gradflow/error.hpp"
#include "gradflow/geometry.hpp"
#include "gradflow/tensor.hpp"

// Forward and backward rules for each layer. Every forward returns its
// output plus whatever the matching backward needs (the cache); every
// backward consumes the upstream error and produces the downstream error
// plus parameter gradients.

namespace gradflow {

enum class Mode { kTrain, kInfer };

// ---------------------------------------------------------------------------
// softmax + cross-entropy head

inline constexpr double kCrossEntropyFloor = 1e-12;

// Row-wise softmax with max subtraction; the shift leaves the value
// invariant but keeps the exponentials in range.
inline Matrix softmax_forward(const Matrix& logits) {
  for (double v : logits.data) {
    if (!std::isfinite(v)) throw NumericError("softmax_forward: non-finite logit");
  }
  Matrix out(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    double m = logits(i, 0);
    for (std::size_t j = 1; j < logits.cols; ++j) m = std::max(m, logits(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) {
      const double e = std::exp(logits(i, j) - m);
      out(i, j) = e;
      denom += e;
    }
    for (std::size_t j = 0; j < logits.cols; ++j) out(i, j) /= denom;
  }
  return out;
}

// Total derivative of the softmax: dY = Y o (dA - broadcast(Y (.) dA)),
// where (.) is the per-row feature dot. Exposed so the fused head below can
// be cross-checked against the two-step route.
inline Matrix softmax_jvp(const Matrix& y_pred, const Matrix& da) {
  require_same_shape(y_pred, da, "softmax_jvp");
  const Vector row_dot = feature_dot(y_pred, da);
  Matrix out(y_pred.rows, y_pred.cols);
  for (std::size_t i = 0; i < y_pred.rows; ++i) {
    for (std::size_t j = 0; j < y_pred.cols; ++j) {
      out(i, j) = y_pred(i, j) * (da(i, j) - row_dot[i]);
    }
  }
  return out;
}

inline void require_one_hot(const Matrix& y_gt, const char* op) {
  for (std::size_t i = 0; i < y_gt.rows; ++i) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < y_gt.cols; ++j) {
      const double v = y_gt(i, j);
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        throw LabelError(std::string(op) + ": row " + std::to_string(i) +
                         " has entry neither 0 nor 1");
      }
    }
    if (ones != 1) {
      throw LabelError(std::string(op) + ": row " + std::to_string(i) + " has " +
                       std::to_string(ones) + " ones, expected exactly 1");
    }
  }
}

struct LossResult {
  Vector per_sample;
  double total = 0.0;
};

// Per-sample -log y_pred(c_gt), summed over the minibatch. The predicted
// probability is floored at 1e-12 before the log.
inline LossResult cross_entropy_loss(const Matrix& y_pred, const Matrix& y_gt) {
  require_same_shape(y_pred, y_gt, "cross_entropy_loss");
  require_one_hot(y_gt, "cross_entropy_loss");
  LossResult res;
  res.per_sample.resize(y_pred.rows);
  for (std::size_t i = 0; i < y_pred.rows; ++i) {
    double p = 0.0;
    for (std::size_t j = 0; j < y_pred.cols; ++j) {
      if (y_gt(i, j) == 1.0) p = y_pred(i, j);
    }
    const double loss = -std::log(std::max(p, kCrossEntropyFloor));
    res.per_sample[i] = loss;
    res.total += loss;
  }
  return res;
}

// Fused softmax + cross-entropy backward: the error at the embedding.
inline Matrix softmax_ce_backward(const Matrix& y_pred, const Matrix& y_gt) {
  require_same_shape(y_pred, y_gt, "softmax_ce_backward");
  Matrix out(y_pred.rows, y_pred.cols);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = y_pred.data[i] - y_gt.data[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// ReLU

enum class ActivationKind { kRelu };

// g'(0) is frozen to the right-sided derivative 1.
inline double relu_g(double x) { return x >= 0.0 ? x : 0.0; }
inline double relu_gprime(double x) { return x >= 0.0 ? 1.0 : 0.0; }

inline Matrix relu_forward(const Matrix& a) {
  Matrix out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = relu_g(a.data[i]);
  return out;
}

inline Tensor4 relu_forward(const Tensor4& a) {
  Tensor4 out(a.n, a.d, a.h, a.w);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = relu_g(a.data[i]);
  return out;
}

// input = the cached forward input A_{i-1}.
inline Matrix relu_backward(const Matrix& delta, const Matrix& input) {
  require_same_shape(delta, input, "relu_backward");
  Matrix out(delta.rows, delta.cols);
  for (std::size_t i = 0; i < delta.data.size(); ++i) {
    out.data[i] = delta.data[i] * relu_gprime(input.data[i]);
  }
  return out;
}

inline Tensor4 relu_backward(const Tensor4& delta, const Tensor4& input) {
  require_same_shape(delta, input, "relu_backward");
  Tensor4 out(delta.n, delta.d, delta.h, delta.w);
  for (std::size_t i = 0; i < delta.data.size(); ++i) {
    out.data[i] = delta.data[i] * relu_gprime(input.data[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// fully connected

inline Matrix fc_forward(const Matrix& a, const Matrix& w, const Vector& b) {
  return broadcast_add_bias(matmul(a, w), b);
}

struct FcGrads {
  Matrix delta_in;
  Matrix dw;
  Vector db;
};

// input = the cached forward input A_{i-1}.
inline FcGrads fc_backward(const Matrix& delta, const Matrix& input, const Matrix& w) {
  FcGrads g;
  g.delta_in = matmul(delta, transpose(w));
  g.dw = matmul(transpose(input), delta);
  g.db = contract_bias(delta);
  return g;
}

// ---------------------------------------------------------------------------
// maxpool

struct MaxpoolCache {
  // Per output cell, the flat index (pi*r_pad + pj) of the chosen maximum in
  // the padded input plane; ties go to the first cell in row-major scan.
  std::vector<std::size_t> argmax;
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t r_in = 0;
  std::size_t pad = 0;
};

struct MaxpoolResult {
  Tensor4 out;
  MaxpoolCache cache;
};

inline MaxpoolResult maxpool_forward(const Tensor4& a, const SamplingTriplet& p) {
  const std::size_t r_in = a.r();
  const std::size_t r_out = out_resolution(r_in, p);
  const Tensor4 padded = pad_spatial(a, p.p);
  const std::size_t r_pad = r_in + 2 * p.p;

  MaxpoolResult res;
  res.out = Tensor4(a.n, a.d, r_out, r_out);
  res.cache = MaxpoolCache{{}, a.n, a.d, r_in, p.p};
  res.cache.argmax.resize(res.out.size());

  std::size_t cell = 0;
  for (std::size_t s = 0; s < a.n; ++s) {
    for (std::size_t c = 0; c < a.d; ++c) {
      for (std::size_t oi = 0; oi < r_out; ++oi) {
        for (std::size_t oj = 0; oj < r_out; ++oj) {
          double best = padded(s, c, oi * p.s, oj * p.s);
          std::size_t best_idx = (oi * p.s) * r_pad + (oj * p.s);
          for (std::size_t u = 0; u < p.k; ++u) {
            for (std::size_t v = 0; v < p.k; ++v) {
              const double val = padded(s, c, oi * p.s + u, oj * p.s + v);
              if (val > best) {
                best = val;
                best_idx = (oi * p.s + u) * r_pad + (oj * p.s + v);
              }
            }
          }
          res.out(s, c, oi, oj) = best;
          res.cache.argmax[cell++] = best_idx;
        }
      }
    }
  }
  return res;
}

// Routes each upstream error component to the cell that won the forward max;
// overlapping patches accumulate additively.
inline Tensor4 maxpool_backward(const Tensor4& delta, const MaxpoolCache& cache) {
  if (cache.argmax.size() != delta.size() || delta.n != cache.n || delta.d != cache.d) {
    throw UsageError("maxpool_backward: cache does not match upstream error " +
                     delta.shape_str());
  }
  const std::size_t r_pad = cache.r_in + 2 * cache.pad;
  Tensor4 out(cache.n, cache.d, cache.r_in, cache.r_in);
  std::size_t cell = 0;
  for (std::size_t s = 0; s < delta.n; ++s) {
    for (std::size_t c = 0; c < delta.d; ++c) {
      for (std::size_t oi = 0; oi < delta.h; ++oi) {
        for (std::size_t oj = 0; oj < delta.w; ++oj) {
          const std::size_t idx = cache.argmax[cell++];
          const std::size_t pi = idx / r_pad;
          const std::size_t pj = idx % r_pad;
          // Maxima that landed on padding cells have no input to route to.
          if (pi < cache.pad || pj < cache.pad) continue;
          const std::size_t i = pi - cache.pad;
          const std::size_t j = pj - cache.pad;
          if (i >= cache.r_in || j >= cache.r_in) continue;
          out(s, c, i, j) += delta(s, c, oi, oj);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// flatten / fold

struct FlattenCache {
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t r = 0;
};

struct FlattenResult {
  Matrix out;
  FlattenCache cache;
};

// Per-sample reshape in (depth, row, col) order; with the row-major tensor
// layout this is a contiguous copy.
inline FlattenResult flatten_forward(const Tensor4& a) {
  const std::size_t r = a.r();
  FlattenResult res;
  res.cache = FlattenCache{a.n, a.d, r};
  res.out = Matrix(a.n, a.d * r * r);
  res.out.data = a.data;
  return res;
}

inline Tensor4 fold_backward(const Matrix& delta, const FlattenCache& cache) {
  if (delta.rows != cache.n || delta.cols != cache.d * cache.r * cache.r) {
    throw ShapeError("fold_backward: " + delta.shape_str() + " does not fold to " +
                     std::to_string(cache.n) + "x" + std::to_string(cache.d) + "x" +
                     std::to_string(cache.r) + "x" + std::to_string(cache.r));
  }
  Tensor4 out(cache.n, cache.d, cache.r, cache.r);
  out.data = delta.data;
  return out;
}

// ---------------------------------------------------------------------------
// convolution

inline void require_conv_shapes(const Tensor4& a, const Tensor4& w, const Vector& b,
                                const SamplingTriplet& p, const char* op) {
  if (w.d != a.d) {
    throw ShapeError(std::string(op) + ": kernel depth " + std::to_string(w.d) +
                     " vs input depth " + std::to_string(a.d));
  }
  if (w.h != p.k || w.w != p.k) {
    throw ShapeError(std::string(op) + ": kernel bank " + w.shape_str() +
                     " inconsistent with " + p.str());
  }
  if (b.size() != w.n) {
    throw ShapeError(std::string(op) + ": bias length " + std::to_string(b.size()) +
                     " vs " + std::to_string(w.n) + " kernels");
  }
}

struct ConvCache {
  Tensor4 input;
  Matrix cols;  // im2col(input)
};

struct ConvResult {
  Tensor4 out;
  ConvCache cache;
};

// GEMM formulation: fold(unrolled kernels x im2col(input)) + bias.
inline ConvResult conv_forward_gemm(const Tensor4& a, const Tensor4& w, const Vector& b,
                                    const SamplingTriplet& p) {
  require_conv_shapes(a, w, b, p, "conv_forward_gemm");
  const std::size_t r_out = out_resolution(a.r(), p);
  ConvResult res;
  res.cache.input = a;
  res.cache.cols = im2col(a, p);
  const Matrix gemm = matmul(unroll_kernels(w), res.cache.cols);
  res.out = broadcast_add_bias(f4d(gemm, a.n, w.n, r_out), b);
  return res;
}

// Sliding-window formulation; the in-repo reference the GEMM path is
// checked against.
inline Tensor4 conv_forward_naive(const Tensor4& a, const Tensor4& w, const Vector& b,
                                  const SamplingTriplet& p) {
  require_conv_shapes(a, w, b, p, "conv_forward_naive");
  const std::size_t r_in = a.r();
  const std::size_t r_out = out_resolution(r_in, p);
  const Tensor4 padded = pad_spatial(a, p.p);
  Tensor4 out(a.n, w.n, r_out, r_out);
  for (std::size_t s = 0; s < a.n; ++s) {
    for (std::size_t co = 0; co < w.n; ++co) {
      for (std::size_t oi = 0; oi < r_out; ++oi) {
        for (std::size_t oj = 0; oj < r_out; ++oj) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < a.d; ++ci) {
            for (std::size_t u = 0; u < p.k; ++u) {
              for (std::size_t v = 0; v < p.k; ++v) {
                acc += w(co, ci, u, v) * padded(s, ci, oi * p.s + u, oj * p.s + v);
              }
            }
          }
          out(s, co, oi, oj) = acc + b[co];
        }
      }
    }
  }
  return out;
}

struct ConvGrads {
  Tensor4 delta_in;
  Tensor4 dw;
  Vector db;
};

// Backward pass. dW pairs the folded error with the cached im2col columns;
// dB contracts the error over samples and space; the downstream error is a
// fractionally strided convolution of the depth-transposed, 180-rotated
// kernels over the internally zero-filled error.
//
// The fractional-stride convolution runs at full correlation padding (k-1)
// and is then sliced to the input window. For exact window fits this equals
// the (k, 1, k-p-1) sampling directly; for inexact fits the trailing cells
// the forward floor dropped sit outside the correlation support and keep
// their mathematically correct zero gradient.
inline ConvGrads conv_backward(const Tensor4& delta, const ConvCache& cache, const Tensor4& w,
                               const SamplingTriplet& p) {
  if (cache.input.size() == 0) {
    throw UsageError("conv_backward: forward cache missing");
  }
  const std::size_t r_in = cache.input.r();
  const std::size_t r_out = out_resolution(r_in, p);
  if (delta.n != cache.input.n || delta.d != w.n || delta.r() != r_out) {
    throw ShapeError("conv_backward: upstream error " + delta.shape_str() +
                     " inconsistent with forward output");
  }

  ConvGrads g;
  g.dw = roll_kernels(matmul(f2d(delta), transpose(cache.cols)), w.n, w.d, p.k);
  g.db = contract_bias_4d(delta);

  const BackwardSampling back = backward_sampling(p);
  const Tensor4 spread = dilate_internal(delta, back.internal_gap);
  const Tensor4 w_hat = rot180_transpose_depth(w);
  const SamplingTriplet full{p.k, 1, p.k - 1};
  const std::size_t r_full = out_resolution(spread.r(), full);
  const Matrix gemm = matmul(unroll_kernels(w_hat), im2col(spread, full));
  const Tensor4 corr = f4d(gemm, delta.n, w.d, r_full);

  g.delta_in = Tensor4(delta.n, w.d, r_in, r_in);
  for (std::size_t s = 0; s < delta.n; ++s) {
    for (std::size_t c = 0; c < w.d; ++c) {
      for (std::size_t i = 0; i < r_in; ++i) {
        if (i + p.p >= r_full) break;
        for (std::size_t j = 0; j < r_in; ++j) {
          if (j + p.p >= r_full) break;
          g.delta_in(s, c, i, j) = corr(s, c, i + p.p, j + p.p);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// batch normalization

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

struct BatchNormState {
  Vector w;             // per-feature scale
  Vector b;             // per-feature shift
  Vector running_mean;  // EMA of batch means
  Vector running_var;   // EMA of biased batch variances
  double momentum = kBatchNormMomentum;
  double eps = kBatchNormEps;

  explicit BatchNormState(std::size_t f = 0)
      : w(f, 1.0), b(f, 0.0), running_mean(f, 0.0), running_var(f, 1.0) {}
};

struct BnCache {
  Matrix abar;   // normalized activations
  Vector sigma;  // sqrt(var + eps) per feature
  bool valid = false;
};

struct BnResult {
  Matrix out;
  BnCache cache;
};

// Train mode: biased (1/n) minibatch statistics, running stats updated as
// running <- (1-momentum)*running + momentum*batch. Infer mode normalizes
// with the running statistics and produces no cache.
inline BnResult batchnorm_forward(const Matrix& a, BatchNormState& state, Mode mode) {
  const std::size_t f = state.w.size();
  if (a.cols != f) {
    throw ShapeError("batchnorm_forward: " + std::to_string(a.cols) + " features vs state " +
                     std::to_string(f));
  }
  BnResult res;
  if (mode == Mode::kInfer) {
    Vector inv(f);
    for (std::size_t j = 0; j < f; ++j) {
      inv[j] = 1.0 / std::sqrt(state.running_var[j] + state.eps);
    }
    Matrix centered = a;
    for (std::size_t i = 0; i < a.rows; ++i) {
      for (std::size_t j = 0; j < f; ++j) centered(i, j) -= state.running_mean[j];
    }
    res.out = broadcast_add_bias(diag_broadcast_mul(diag_broadcast_mul(centered, inv), state.w),
                                 state.b);
    return res;
  }

  const std::size_t n = a.rows;
  if (n < 2) {
    throw BatchSizeError("batchnorm_forward: train mode needs at least 2 samples, got " +
                         std::to_string(n));
  }
  Vector mu(f, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) mu[j] += a(i, j);
  }
  for (std::size_t j = 0; j < f; ++j) mu[j] /= static_cast<double>(n);

  Vector var(f, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      const double dev = a(i, j) - mu[j];
      var[j] += dev * dev;
    }
  }
  for (std::size_t j = 0; j < f; ++j) var[j] /= static_cast<double>(n);

  res.cache.sigma.resize(f);
  Vector inv(f);
  for (std::size_t j = 0; j < f; ++j) {
    res.cache.sigma[j] = std::sqrt(var[j] + state.eps);
    inv[j] = 1.0 / res.cache.sigma[j];
  }

  res.cache.abar = Matrix(n, f);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      res.cache.abar(i, j) = (a(i, j) - mu[j]) * inv[j];
    }
  }
  res.cache.valid = true;
  res.out = broadcast_add_bias(diag_broadcast_mul(res.cache.abar, state.w), state.b);

  for (std::size_t j = 0; j < f; ++j) {
    state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mu[j];
    state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * var[j];
  }
  return res;
}

struct BnGrads {
  Matrix delta_in;
  Vector dw;
  Vector db;
};

inline BnGrads batchnorm_backward(const Matrix& delta, const BnCache& cache,
                                  const BatchNormState& state) {
  if (!cache.valid) {
    throw UsageError("batchnorm_backward: no train-mode cache (infer-mode backward)");
  }
  require_same_shape(delta, cache.abar, "batchnorm_backward");
  const std::size_t n = delta.rows;
  const std::size_t f = delta.cols;

  const Matrix scaled = diag_broadcast_mul(delta, state.w);      // Delta * diag(w)
  const Vector col_sum = contract_bias(scaled);                  // sum over samples
  const Vector dot_sum = contract_bias(hadamard(cache.abar, scaled));

  BnGrads g;
  g.delta_in = Matrix(n, f);
  const double dn = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      g.delta_in(i, j) = (dn * scaled(i, j) - col_sum[j] - cache.abar(i, j) * dot_sum[j]) /
                         (dn * cache.sigma[j]);
    }
  }
  g.dw = contract_bias(hadamard(cache.abar, delta));  // diag(abar^t delta)
  g.db = contract_bias(delta);
  return g;
}

// 4-d wrappers: image data is viewed as feature vectors with effective
// minibatch size n*r*r, normalized, and folded back.

struct BnResult4d {
  Tensor4 out;
  BnCache cache;
};

inline BnResult4d batchnorm_forward(const Tensor4& a, BatchNormState& state, Mode mode) {
  const std::size_t r = a.r();
  BnResult flat = batchnorm_forward(f2d_t(a), state, mode);
  BnResult4d res;
  res.out = f4d_t(flat.out, a.n, a.d, r);
  res.cache = std::move(flat.cache);
  return res;
}

struct BnGrads4d {
  Tensor4 delta_in;
  Vector dw;
  Vector db;
};

inline BnGrads4d batchnorm_backward(const Tensor4& delta, const BnCache& cache,
                                    const BatchNormState& state) {
  const std::size_t r = delta.r();
  BnGrads flat = batchnorm_backward(f2d_t(delta), cache, state);
  BnGrads4d res;
  res.delta_in = f4d_t(flat.delta_in, delta.n, delta.d, r);
  res.dw = std::move(flat.dw);
  res.db = std::move(flat.db);
  return res;
}

// ---------------------------------------------------------------------------
// shortcut junction

inline Matrix shortcut_add(const Matrix& a_skip, const Matrix& a_residual) {
  require_same_shape(a_skip, a_residual, "shortcut_add");
  Matrix out(a_skip.rows, a_skip.cols);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = a_skip.data[i] + a_residual.data[i];
  }
  return out;
}

inline Tensor4 shortcut_add(const Tensor4& a_skip, const Tensor4& a_residual) {
  require_same_shape(a_skip, a_residual, "shortcut_add");
  Tensor4 out(a_skip.n, a_skip.d, a_skip.h, a_skip.w);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = a_skip.data[i] + a_residual.data[i];
  }
  return out;
}

}  // namespace gradflow
