#include "gradflow/geometry.hpp"

#include <gtest/gtest.h>

#include <set>
#include <utility>

#include "test_util.hpp"

namespace gradflow {
namespace {

using test::rand_tensor;

TEST(OutResolution, ReferenceNetValues) {
  EXPECT_EQ(out_resolution(28, {5, 1, 0}), 24u);
  EXPECT_EQ(out_resolution(24, {2, 2, 0}), 12u);
  EXPECT_EQ(out_resolution(5, {3, 2, 0}), 2u);
  EXPECT_EQ(out_resolution(7, {1, 1, 0}), 7u);
}

TEST(OutResolution, PreconditionViolationNamesInputs) {
  try {
    out_resolution(3, {5, 1, 0});
    FAIL() << "expected GeometryError";
  } catch (const GeometryError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("r_in=3"), std::string::npos);
    EXPECT_NE(msg.find("k=5"), std::string::npos);
  }
}

TEST(EnumeratePatches, KnownOrigins) {
  auto origins = enumerate_patches(4, {2, 2, 0});
  ASSERT_EQ(origins.size(), 4u);
  EXPECT_EQ(origins[0], std::make_pair(std::size_t{0}, std::size_t{0}));
  EXPECT_EQ(origins[1], std::make_pair(std::size_t{0}, std::size_t{2}));
  EXPECT_EQ(origins[2], std::make_pair(std::size_t{2}, std::size_t{0}));
  EXPECT_EQ(origins[3], std::make_pair(std::size_t{2}, std::size_t{2}));

  EXPECT_EQ(enumerate_patches(5, {3, 2, 0}).size(), 4u);

  auto single = enumerate_patches(3, {3, 1, 0});
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0], std::make_pair(std::size_t{0}, std::size_t{0}));
}

// Every valid (r, k, s, p) with r <= 12, k <= 5, s <= 3, p <= 2: the patch
// count matches out_resolution squared and all patches stay on the padded
// canvas.
TEST(EnumeratePatches, GridCountsAndBounds) {
  for (std::size_t r = 1; r <= 12; ++r) {
    for (std::size_t k = 1; k <= 5; ++k) {
      for (std::size_t s = 1; s <= 3; ++s) {
        for (std::size_t p = 0; p <= 2; ++p) {
          if (r + 2 * p < k) continue;
          const SamplingTriplet trip{k, s, p};
          const std::size_t r_out = out_resolution(r, trip);
          auto origins = enumerate_patches(r, trip);
          EXPECT_EQ(origins.size(), r_out * r_out);
          for (auto [oi, oj] : origins) {
            EXPECT_LE(oi + k, r + 2 * p);
            EXPECT_LE(oj + k, r + 2 * p);
          }
        }
      }
    }
  }
}

TEST(Im2col, ReferenceShapes) {
  Matrix a0 = im2col(Tensor4(2, 1, 28, 28), {5, 1, 0});
  EXPECT_EQ(a0.rows, 25u);
  EXPECT_EQ(a0.cols, 24u * 24u * 2u);

  Matrix a4 = im2col(Tensor4(2, 6, 12, 12), {5, 1, 0});
  EXPECT_EQ(a4.rows, 150u);
  EXPECT_EQ(a4.cols, 8u * 8u * 2u);
}

TEST(Im2col, SinglePatchIsOneColumn) {
  Tensor4 a(1, 1, 2, 2);
  a(0, 0, 0, 0) = 1;
  a(0, 0, 0, 1) = 2;
  a(0, 0, 1, 0) = 3;
  a(0, 0, 1, 1) = 4;
  Matrix cols = im2col(a, {2, 1, 0});
  ASSERT_EQ(cols.rows, 4u);
  ASSERT_EQ(cols.cols, 1u);
  EXPECT_EQ(cols(0, 0), 1.0);
  EXPECT_EQ(cols(1, 0), 2.0);
  EXPECT_EQ(cols(2, 0), 3.0);
  EXPECT_EQ(cols(3, 0), 4.0);
}

TEST(KernelUnroll, RoundTripAndShapes) {
  Rng rng(5);
  Tensor4 w = rand_tensor(16, 6, 5, rng);
  EXPECT_EQ(roll_kernels(unroll_kernels(w), 16, 6, 5).data, w.data);

  EXPECT_EQ(unroll_kernels(Tensor4(6, 1, 5, 5)).shape_str(), "6x25");
  EXPECT_EQ(unroll_kernels(Tensor4(16, 6, 5, 5)).shape_str(), "16x150");
  EXPECT_THROW(roll_kernels(Matrix(16, 149), 16, 6, 5), ShapeError);
}

TEST(BackwardSampling, DerivedTriplets) {
  BackwardSampling b1 = backward_sampling({5, 1, 0});
  EXPECT_EQ(b1.base.k, 5u);
  EXPECT_EQ(b1.base.s, 1u);
  EXPECT_EQ(b1.base.p, 4u);
  EXPECT_EQ(b1.internal_gap, 0u);

  BackwardSampling b2 = backward_sampling({3, 2, 0});
  EXPECT_EQ(b2.base.p, 2u);
  EXPECT_EQ(b2.internal_gap, 1u);

  BackwardSampling b3 = backward_sampling({1, 1, 0});
  EXPECT_EQ(b3.base.k, 1u);
  EXPECT_EQ(b3.base.p, 0u);
  EXPECT_EQ(b3.internal_gap, 0u);

  // over-padded forward convolution is unsupported
  EXPECT_THROW(backward_sampling({1, 1, 1}), GeometryError);
}

TEST(DilateInternal, Placement) {
  Tensor4 d(1, 1, 2, 2);
  d(0, 0, 0, 0) = 1;
  d(0, 0, 0, 1) = 2;
  d(0, 0, 1, 0) = 3;
  d(0, 0, 1, 1) = 4;

  EXPECT_EQ(dilate_internal(d, 0).data, d.data);

  Tensor4 spread = dilate_internal(d, 1);
  ASSERT_EQ(spread.h, 3u);
  const double expect[3][3] = {{1, 0, 2}, {0, 0, 0}, {3, 0, 4}};
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(spread(0, 0, i, j), expect[i][j]);
  }

  Tensor4 one(1, 1, 1, 1, 9.0);
  EXPECT_EQ(dilate_internal(one, 3).data, one.data);
}

TEST(Rot180TransposeDepth, InvolutionAndShapes) {
  Rng rng(11);
  Tensor4 w = rand_tensor(4, 3, 5, rng);
  Tensor4 hat = rot180_transpose_depth(w);
  EXPECT_EQ(hat.n, 3u);
  EXPECT_EQ(hat.d, 4u);
  EXPECT_EQ(rot180_transpose_depth(hat).data, w.data);
  EXPECT_EQ(hat(2, 1, 0, 0), w(1, 2, 4, 4));

  Tensor4 big(16, 6, 5, 5);
  EXPECT_EQ(rot180_transpose_depth(big).shape_str(), "6x16x5x5");

  // k = 1 reduces to a pure depth transpose
  Tensor4 point(2, 3, 1, 1);
  point(1, 2, 0, 0) = 7.0;
  EXPECT_EQ(rot180_transpose_depth(point)(2, 1, 0, 0), 7.0);
}

// The forward sliding window and the backward fractionally strided window
// touch exactly the same (input cell, output cell) pairs.
TEST(Connectivity, ForwardBackwardPairsIdentical) {
  const std::size_t r_in = 5;
  const SamplingTriplet fwd{3, 2, 0};
  const std::size_t r_out = out_resolution(r_in, fwd);

  std::set<std::pair<std::size_t, std::size_t>> forward_pairs;
  auto origins = enumerate_patches(r_in, fwd);
  for (std::size_t q = 0; q < origins.size(); ++q) {
    for (std::size_t u = 0; u < fwd.k; ++u) {
      for (std::size_t v = 0; v < fwd.k; ++v) {
        const std::size_t in_cell = (origins[q].first + u) * r_in + (origins[q].second + v);
        forward_pairs.emplace(in_cell, q);
      }
    }
  }

  const BackwardSampling back = backward_sampling(fwd);
  const std::size_t step = back.internal_gap + 1;
  const std::size_t r_dil = r_out + (r_out - 1) * back.internal_gap;
  std::set<std::pair<std::size_t, std::size_t>> backward_pairs;
  auto back_origins = enumerate_patches(r_dil, back.base);
  ASSERT_EQ(back_origins.size(), r_in * r_in);
  for (std::size_t cell = 0; cell < back_origins.size(); ++cell) {
    for (std::size_t u = 0; u < back.base.k; ++u) {
      for (std::size_t v = 0; v < back.base.k; ++v) {
        // padded coordinate -> dilated canvas coordinate
        const std::size_t pi = back_origins[cell].first + u;
        const std::size_t pj = back_origins[cell].second + v;
        if (pi < back.base.p || pj < back.base.p) continue;
        const std::size_t di = pi - back.base.p;
        const std::size_t dj = pj - back.base.p;
        if (di >= r_dil || dj >= r_dil) continue;
        if (di % step != 0 || dj % step != 0) continue;  // internal zero-fill
        const std::size_t q = (di / step) * r_out + (dj / step);
        backward_pairs.emplace(cell, q);
      }
    }
  }

  EXPECT_EQ(forward_pairs, backward_pairs);
}

}  // namespace
}  // namespace gradflow
