#include "gradflow/layers.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

namespace gradflow {
namespace {

using test::central_diff_at;
using test::max_abs_diff;
using test::rand_matrix;
using test::rand_tensor;
using test::rel_err;

Matrix make(std::size_t rows, std::size_t cols, std::initializer_list<double> vals) {
  Matrix m(rows, cols);
  std::copy(vals.begin(), vals.end(), m.data.begin());
  return m;
}

Matrix one_hot_row(std::size_t cols, std::size_t hot) {
  Matrix m(1, cols, 0.0);
  m(0, hot) = 1.0;
  return m;
}

// --- softmax -----------------------------------------------------------

TEST(Softmax, EqualLogitsGiveUniform) {
  Matrix logits(1, 10, 3.7);
  Matrix y = softmax_forward(logits);
  for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(y(0, j), 0.1, 1e-15);
}

TEST(Softmax, SaturationLimit) {
  Matrix logits(1, 10, 0.0);
  logits(0, 0) = 50.0;
  Matrix y = softmax_forward(logits);
  EXPECT_GE(y(0, 0), 1.0 - 1e-20);
}

TEST(Softmax, ProportionalExponentials) {
  Matrix logits = make(1, 3, {std::log(1.0), std::log(2.0), std::log(3.0)});
  Matrix y = softmax_forward(logits);
  EXPECT_NEAR(y(0, 0), 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(y(0, 1), 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(y(0, 2), 3.0 / 6.0, 1e-15);
}

TEST(Softmax, NonFiniteInputRejected) {
  Matrix logits(1, 3, 0.0);
  logits(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(softmax_forward(logits), NumericError);
}

TEST(Softmax, RowsSumToOneAndStayInOpenInterval) {
  Rng rng(31);
  Matrix logits = rand_matrix(100, 10, rng, -30.0, 30.0);
  Matrix y = softmax_forward(logits);
  for (std::size_t i = 0; i < y.rows; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < y.cols; ++j) {
      EXPECT_GT(y(i, j), 0.0);
      EXPECT_LT(y(i, j), 1.0);
      sum += y(i, j);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

// --- cross-entropy -----------------------------------------------------

TEST(CrossEntropy, KnownValues) {
  Matrix gt = one_hot_row(3, 1);

  Matrix perfect = make(1, 3, {0.0, 1.0, 0.0});
  EXPECT_EQ(cross_entropy_loss(perfect, gt).total, 0.0);

  Matrix inv_e = make(1, 3, {0.5, 1.0 / std::exp(1.0), 0.2});
  EXPECT_NEAR(cross_entropy_loss(inv_e, gt).total, 1.0, 1e-15);

  Matrix uniform(2, 10, 0.1);
  Matrix gt10(2, 10, 0.0);
  gt10(0, 3) = 1.0;
  gt10(1, 7) = 1.0;
  LossResult res = cross_entropy_loss(uniform, gt10);
  EXPECT_NEAR(res.per_sample[0], std::log(10.0), 1e-12);
  EXPECT_NEAR(res.per_sample[1], std::log(10.0), 1e-12);
  EXPECT_NEAR(res.total, 2.0 * std::log(10.0), 1e-12);
}

TEST(CrossEntropy, RejectsNonOneHotLabels) {
  Matrix pred(1, 3, 1.0 / 3.0);
  EXPECT_THROW(cross_entropy_loss(pred, make(1, 3, {1, 1, 0})), LabelError);
  EXPECT_THROW(cross_entropy_loss(pred, make(1, 3, {0, 0, 0})), LabelError);
  EXPECT_THROW(cross_entropy_loss(pred, make(1, 3, {0.5, 0.5, 0})), LabelError);
}

TEST(CrossEntropy, FloorKeepsLossFinite) {
  Matrix gt = one_hot_row(2, 0);
  Matrix pred = make(1, 2, {0.0, 1.0});
  EXPECT_NEAR(cross_entropy_loss(pred, gt).total, -std::log(1e-12), 1e-9);
}

// --- fused softmax + cross-entropy backward ----------------------------

TEST(SoftmaxCeBackward, KnownValues) {
  Matrix gt = one_hot_row(4, 0);
  Matrix uniform(1, 4, 0.25);

  EXPECT_EQ(softmax_ce_backward(gt, gt).data, Matrix(1, 4, 0.0).data);

  Matrix d = softmax_ce_backward(uniform, gt);
  EXPECT_NEAR(d(0, 0), -0.75, 1e-15);
  EXPECT_NEAR(d(0, 1), 0.25, 1e-15);
  EXPECT_NEAR(d(0, 2), 0.25, 1e-15);
  EXPECT_NEAR(d(0, 3), 0.25, 1e-15);

  EXPECT_THROW(softmax_ce_backward(uniform, Matrix(2, 4)), ShapeError);
}

TEST(SoftmaxCeBackward, RowsSumToZero) {
  Rng rng(17);
  Matrix logits = rand_matrix(50, 10, rng, -5.0, 5.0);
  Matrix y = softmax_forward(logits);
  Matrix gt(50, 10, 0.0);
  for (std::size_t i = 0; i < 50; ++i) gt(i, rng.below(10)) = 1.0;
  Matrix d = softmax_ce_backward(y, gt);
  for (std::size_t i = 0; i < d.rows; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < d.cols; ++j) sum += d(i, j);
    EXPECT_NEAR(sum, 0.0, 1e-12);
  }
}

// Perturbing one logit changes the total loss by delta * h.
TEST(SoftmaxCeBackward, MatchesCentralDifferences) {
  Rng rng(23);
  Matrix logits = rand_matrix(3, 5, rng, -2.0, 2.0);
  Matrix gt(3, 5, 0.0);
  for (std::size_t i = 0; i < 3; ++i) gt(i, rng.below(5)) = 1.0;

  Matrix delta = softmax_ce_backward(softmax_forward(logits), gt);
  auto loss = [&]() { return cross_entropy_loss(softmax_forward(logits), gt).total; };
  for (std::size_t idx = 0; idx < logits.data.size(); ++idx) {
    const double fd = central_diff_at(loss, logits.data[idx], 1e-6);
    EXPECT_LT(rel_err(fd, delta.data[idx]), 1e-7) << "coordinate " << idx;
  }
}

// The fused head agrees with the two-step route through the standalone
// softmax derivative: (-Ygt o 1/Ypred) . dYpred == (Ypred - Ygt) . dA.
TEST(SoftmaxJvp, ChainsToFusedForm) {
  Rng rng(27);
  Matrix logits = rand_matrix(4, 6, rng, -3.0, 3.0);
  Matrix y = softmax_forward(logits);
  Matrix gt(4, 6, 0.0);
  for (std::size_t i = 0; i < 4; ++i) gt(i, rng.below(6)) = 1.0;

  for (int trial = 0; trial < 10; ++trial) {
    Matrix da = rand_matrix(4, 6, rng);
    Matrix dy = softmax_jvp(y, da);
    Matrix loss_grad(4, 6);
    for (std::size_t i = 0; i < loss_grad.data.size(); ++i) {
      loss_grad.data[i] = -gt.data[i] / y.data[i];
    }
    const double two_step = frobenius(loss_grad, dy);
    const double fused = frobenius(softmax_ce_backward(y, gt), da);
    EXPECT_NEAR(two_step, fused, 1e-12);
  }
}

// --- ReLU ---------------------------------------------------------------

TEST(Relu, ForwardAndMask) {
  Matrix a = make(1, 3, {-1, 0, 2});
  EXPECT_EQ(relu_forward(a).data, make(1, 3, {0, 0, 2}).data);

  Matrix delta(1, 3, 5.0);
  // g'(0) = 1: the error at the exact-zero input passes through
  EXPECT_EQ(relu_backward(delta, a).data, make(1, 3, {0, 5, 5}).data);

  Matrix pos = make(1, 3, {1, 2, 3});
  EXPECT_EQ(relu_backward(delta, pos).data, delta.data);
}

TEST(Relu, TensorOverload) {
  Tensor4 a(1, 1, 2, 2);
  a(0, 0, 0, 0) = -4.0;
  a(0, 0, 1, 1) = 3.0;
  Tensor4 out = relu_forward(a);
  EXPECT_EQ(out(0, 0, 0, 0), 0.0);
  EXPECT_EQ(out(0, 0, 1, 1), 3.0);

  Tensor4 delta(1, 1, 2, 2, 2.0);
  Tensor4 back = relu_backward(delta, a);
  EXPECT_EQ(back(0, 0, 0, 0), 0.0);
  EXPECT_EQ(back(0, 0, 0, 1), 2.0);
}

// --- fully connected ----------------------------------------------------

TEST(FullyConnected, ForwardCases) {
  Matrix eye = make(2, 2, {1, 0, 0, 1});
  Rng rng(3);
  Matrix a = rand_matrix(3, 2, rng);
  EXPECT_EQ(fc_forward(a, eye, Vector{0, 0}).data, a.data);

  Matrix out = fc_forward(Matrix(2, 3, 0.0), Matrix(3, 2, 0.5), Vector{1, 2});
  EXPECT_EQ(out.data, make(2, 2, {1, 2, 1, 2}).data);

  Matrix w = make(2, 3, {1, 0, 1, 0, 1, 1});
  Matrix single = fc_forward(make(1, 2, {1, 2}), w, Vector{0, 0, 0});
  EXPECT_EQ(single.data, make(1, 3, {1, 2, 3}).data);

  EXPECT_THROW(fc_forward(Matrix(1, 3), Matrix(2, 2), Vector{0, 0}), ShapeError);
}

TEST(FullyConnected, BackwardCases) {
  Rng rng(4);
  Matrix a = rand_matrix(2, 3, rng);
  Matrix w = rand_matrix(3, 3, rng);

  FcGrads zero = fc_backward(Matrix(2, 3, 0.0), a, w);
  EXPECT_EQ(zero.delta_in.data, Matrix(2, 3, 0.0).data);
  EXPECT_EQ(zero.dw.data, Matrix(3, 3, 0.0).data);
  EXPECT_EQ(zero.db, Vector(3, 0.0));

  Matrix eye = make(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Matrix delta = rand_matrix(2, 3, rng);
  EXPECT_EQ(fc_backward(delta, a, eye).delta_in.data, delta.data);

  FcGrads g = fc_backward(make(2, 1, {3, 4}), make(2, 1, {1, 2}), Matrix(1, 1, 1.0));
  EXPECT_EQ(g.dw(0, 0), 11.0);
}

TEST(FullyConnected, GradientsMatchCentralDifferences) {
  Rng rng(41);
  Matrix a = rand_matrix(2, 4, rng);
  Matrix w = rand_matrix(4, 3, rng);
  Vector b = test::rand_vector(3, rng);
  Matrix target = rand_matrix(2, 3, rng);

  auto loss = [&]() {
    Matrix out = fc_forward(a, w, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      const double diff = out.data[i] - target.data[i];
      acc += 0.5 * diff * diff;
    }
    return acc;
  };

  Matrix out = fc_forward(a, w, b);
  Matrix delta(out.rows, out.cols);
  for (std::size_t i = 0; i < out.data.size(); ++i) delta.data[i] = out.data[i] - target.data[i];
  FcGrads g = fc_backward(delta, a, w);

  for (std::size_t i = 0; i < w.data.size(); ++i) {
    EXPECT_LT(rel_err(central_diff_at(loss, w.data[i]), g.dw.data[i]), 1e-6);
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_LT(rel_err(central_diff_at(loss, b[i]), g.db[i]), 1e-6);
  }
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    EXPECT_LT(rel_err(central_diff_at(loss, a.data[i]), g.delta_in.data[i]), 1e-6);
  }
}

// --- maxpool ------------------------------------------------------------

Tensor4 ascending_4x4() {
  Tensor4 a(1, 1, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) a.data[i] = static_cast<double>(i + 1);
  return a;
}

TEST(Maxpool, ForwardOnAscendingGrid) {
  MaxpoolResult res = maxpool_forward(ascending_4x4(), {2, 2, 0});
  ASSERT_EQ(res.out.shape_str(), "1x1x2x2");
  EXPECT_EQ(res.out(0, 0, 0, 0), 6.0);
  EXPECT_EQ(res.out(0, 0, 0, 1), 8.0);
  EXPECT_EQ(res.out(0, 0, 1, 0), 14.0);
  EXPECT_EQ(res.out(0, 0, 1, 1), 16.0);
}

TEST(Maxpool, ConstantInputTakesFirstCellPerPatch) {
  Tensor4 a(1, 1, 4, 4, 7.0);
  MaxpoolResult res = maxpool_forward(a, {2, 2, 0});
  for (double v : res.out.data) EXPECT_EQ(v, 7.0);
  // first row-major cell of each patch wins the tie
  EXPECT_EQ(res.cache.argmax[0], 0u * 4u + 0u);
  EXPECT_EQ(res.cache.argmax[1], 0u * 4u + 2u);
  EXPECT_EQ(res.cache.argmax[2], 2u * 4u + 0u);
  EXPECT_EQ(res.cache.argmax[3], 2u * 4u + 2u);
}

TEST(Maxpool, ReferenceShape) {
  MaxpoolResult res = maxpool_forward(Tensor4(2, 6, 24, 24), {2, 2, 0});
  EXPECT_EQ(res.out.shape_str(), "2x6x12x12");
}

TEST(Maxpool, BackwardRoutesToArgmax) {
  MaxpoolResult res = maxpool_forward(ascending_4x4(), {2, 2, 0});
  Tensor4 delta(1, 1, 2, 2, 1.0);
  Tensor4 back = maxpool_backward(delta, res.cache);
  double expect[4][4] = {{0, 0, 0, 0}, {0, 1, 0, 1}, {0, 0, 0, 0}, {0, 1, 0, 1}};
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(back(0, 0, i, j), expect[i][j]);
  }
}

TEST(Maxpool, DisjointPatchesConserveErrorMass) {
  Rng rng(8);
  Tensor4 a = rand_tensor(2, 3, 6, rng);
  MaxpoolResult res = maxpool_forward(a, {2, 2, 0});
  Tensor4 delta = rand_tensor(2, 3, 3, rng);
  Tensor4 back = maxpool_backward(delta, res.cache);
  double sum_delta = 0.0;
  double sum_back = 0.0;
  for (double v : delta.data) sum_delta += v;
  for (double v : back.data) sum_back += v;
  EXPECT_NEAR(sum_delta, sum_back, 1e-12);

  // at most one nonzero per 2x2 patch
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t oi = 0; oi < 3; ++oi) {
        for (std::size_t oj = 0; oj < 3; ++oj) {
          int nonzero = 0;
          for (std::size_t u = 0; u < 2; ++u) {
            for (std::size_t v = 0; v < 2; ++v) {
              if (back(s, c, 2 * oi + u, 2 * oj + v) != 0.0) ++nonzero;
            }
          }
          EXPECT_LE(nonzero, 1);
        }
      }
    }
  }

  Tensor4 zeros(2, 3, 3, 3, 0.0);
  EXPECT_EQ(maxpool_backward(zeros, res.cache).data, Tensor4(2, 3, 6, 6, 0.0).data);
}

TEST(Maxpool, StaleCacheRejected) {
  MaxpoolResult res = maxpool_forward(ascending_4x4(), {2, 2, 0});
  EXPECT_THROW(maxpool_backward(Tensor4(1, 1, 3, 3), res.cache), UsageError);
}

// --- flatten / fold -----------------------------------------------------

TEST(Flatten, RoundTripAndOrder) {
  Rng rng(9);
  Tensor4 x = rand_tensor(2, 16, 4, rng);
  FlattenResult res = flatten_forward(x);
  EXPECT_EQ(res.out.shape_str(), "2x256");
  EXPECT_EQ(fold_backward(res.out, res.cache).data, x.data);

  Tensor4 small(1, 1, 2, 2);
  small(0, 0, 0, 0) = 1;
  small(0, 0, 0, 1) = 2;
  small(0, 0, 1, 0) = 3;
  small(0, 0, 1, 1) = 4;
  FlattenResult flat = flatten_forward(small);
  EXPECT_EQ(flat.out.data, make(1, 4, {1, 2, 3, 4}).data);

  EXPECT_THROW(fold_backward(Matrix(1, 5), flat.cache), ShapeError);
}

// --- shortcut junction --------------------------------------------------

TEST(Shortcut, AddAndShapeGuard) {
  Rng rng(10);
  Matrix a = rand_matrix(2, 3, rng);
  EXPECT_EQ(shortcut_add(a, Matrix(2, 3, 0.0)).data, a.data);
  EXPECT_THROW(shortcut_add(a, Matrix(3, 2)), ShapeError);

  Tensor4 t = rand_tensor(1, 2, 3, rng);
  Tensor4 sum = shortcut_add(t, t);
  for (std::size_t i = 0; i < t.data.size(); ++i) EXPECT_EQ(sum.data[i], 2.0 * t.data[i]);
}

}  // namespace
}  // namespace gradflow
