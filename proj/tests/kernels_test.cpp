#include "patchlens/kernels.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "patchlens/grad_check.hpp"
#include "testutil.hpp"

using patchlens::ConfigError;
using patchlens::ShapeError;
using patchlens::Tensor;
using testutil::random_tensor;

namespace {

// Scalar probe f(x) = sum(w .* op(x)) for a fixed random weighting w, so the
// finite-difference check exercises a general upstream gradient.
Tensor<double> random_like(const Tensor<double>& t, uint64_t seed) {
  return random_tensor(t.shape, seed);
}

}  // namespace

TEST(Rmsnorm, ConstantRowNormalizesToWeight) {
  Tensor<double> x({1, 3}, {2, 2, 2});
  Tensor<double> w({3}, {1, 1, 1});
  auto y = patchlens::rmsnorm(x, w, 0.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y(0, i), 1.0, 1e-12);
}

TEST(Rmsnorm, ZeroInputStaysZeroWithEps) {
  Tensor<double> x({1, 2}, {0, 0});
  Tensor<double> w({2}, {1, 1});
  auto y = patchlens::rmsnorm(x, w, 1e-6);
  EXPECT_EQ(y(0, 0), 0.0);
  EXPECT_EQ(y(0, 1), 0.0);
}

TEST(Rmsnorm, ShapeMismatchThrows) {
  Tensor<double> x({1, 3}, {1, 2, 3});
  Tensor<double> w({2}, {1, 1});
  EXPECT_THROW(patchlens::rmsnorm(x, w, 1e-6), ShapeError);
}

TEST(Rmsnorm, BackwardMatchesFiniteDifferencesAtSpecPoint) {
  Tensor<double> x({1, 2}, {1, 2});
  Tensor<double> w({2}, {1, 1});
  const double eps = 1e-6;
  Tensor<double> dy = Tensor<double>::full({1, 2}, 1.0);  // d sum / d y
  Tensor<double> dx, dw = Tensor<double>::zeros({2});
  patchlens::rmsnorm_backward(x, w, eps, dy, dx, &dw);
  auto f = [&](const Tensor<double>& xx) {
    auto y = patchlens::rmsnorm(xx, w, eps);
    double s = 0;
    for (double v : y.data) s += v;
    return s;
  };
  EXPECT_LE(patchlens::grad_check(f, x, dx, 1e-5), 1e-6);
}

TEST(Rmsnorm, BackwardMatchesFiniteDifferencesRandomized) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto x = random_tensor({3, 5}, 1000 + seed);
    auto w = random_tensor({5}, 2000 + seed);
    auto dy = random_tensor({3, 5}, 3000 + seed);
    Tensor<double> dx, dw = Tensor<double>::zeros({5});
    patchlens::rmsnorm_backward(x, w, 1e-5, dy, dx, &dw);
    auto f = [&](const Tensor<double>& xx) {
      auto y = patchlens::rmsnorm(xx, w, 1e-5);
      double s = 0;
      for (int64_t i = 0; i < y.numel(); ++i) s += y.data[i] * dy.data[i];
      return s;
    };
    ASSERT_LE(patchlens::grad_check(f, x, dx, 1e-4), 1e-6) << "seed " << seed;
    auto fw = [&](const Tensor<double>& ww) {
      auto y = patchlens::rmsnorm(x, ww, 1e-5);
      double s = 0;
      for (int64_t i = 0; i < y.numel(); ++i) s += y.data[i] * dy.data[i];
      return s;
    };
    ASSERT_LE(patchlens::grad_check(fw, w, dw, 1e-4), 1e-6) << "seed " << seed;
  }
}

TEST(Softmax, SymmetricRow) {
  Tensor<double> x({1, 2}, {0, 0});
  auto y = patchlens::softmax_rows(x);
  EXPECT_NEAR(y(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(y(0, 1), 0.5, 1e-12);
}

TEST(Softmax, LargeLogitsStayFinite) {
  Tensor<double> x({1, 2}, {1000, 0});
  auto y = patchlens::softmax_rows(x);
  EXPECT_NEAR(y(0, 0), 1.0, 1e-9);
  EXPECT_NEAR(y(0, 1), 0.0, 1e-9);
  EXPECT_TRUE(y.all_finite());
}

TEST(Softmax, AllNegInfRowThrows) {
  const double inf = std::numeric_limits<double>::infinity();
  Tensor<double> x({1, 3}, {-inf, -inf, -inf});
  EXPECT_THROW(patchlens::softmax_rows(x), ShapeError);
}

TEST(Softmax, RowsSumToOne) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto x = random_tensor({4, 7}, seed, 5.0);
    auto y = patchlens::softmax_rows(x);
    for (int64_t i = 0; i < 4; ++i) {
      double s = 0;
      for (int64_t j = 0; j < 7; ++j) {
        s += y(i, j);
        ASSERT_GE(y(i, j), 0.0);
      }
      ASSERT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, BackwardMatchesFiniteDifferences) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto x = random_tensor({3, 4}, 500 + seed);
    auto dy = random_like(x, 900 + seed);
    auto y = patchlens::softmax_rows(x);
    auto dx = patchlens::softmax_rows_backward(y, dy);
    auto f = [&](const Tensor<double>& xx) {
      auto yy = patchlens::softmax_rows(xx);
      double s = 0;
      for (int64_t i = 0; i < yy.numel(); ++i) s += yy.data[i] * dy.data[i];
      return s;
    };
    ASSERT_LE(patchlens::grad_check(f, x, dx, 1e-4), 1e-6) << "seed " << seed;
  }
}

TEST(Rope, PositionZeroIsIdentity) {
  auto x = random_tensor({1, 2, 8}, 42);
  auto y = patchlens::rope_apply(x, 10000.0, 0);
  EXPECT_LE(patchlens::max_abs_diff(x, y), 1e-12);
}

TEST(Rope, PreservesPerPositionNorm) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto x = random_tensor({5, 2, 8}, seed);
    auto y = patchlens::rope_apply(x, 10000.0, 3);
    for (int64_t t = 0; t < 5; ++t)
      for (int64_t h = 0; h < 2; ++h) {
        double nx = 0, ny = 0;
        for (int64_t i = 0; i < 8; ++i) {
          nx += x(t, h, i) * x(t, h, i);
          ny += y(t, h, i) * y(t, h, i);
        }
        ASSERT_NEAR(std::sqrt(nx), std::sqrt(ny), 1e-6);
      }
  }
}

TEST(Rope, OffsetMatchesFullSequence) {
  auto x = random_tensor({6, 2, 8}, 7);
  auto full = patchlens::rope_apply(x, 10000.0, 0);
  for (int64_t k = 0; k < 6; ++k) {
    Tensor<double> one({1, 2, 8});
    for (int64_t h = 0; h < 2; ++h)
      for (int64_t i = 0; i < 8; ++i) one(0, h, i) = x(k, h, i);
    auto y = patchlens::rope_apply(one, 10000.0, k);
    for (int64_t h = 0; h < 2; ++h)
      for (int64_t i = 0; i < 8; ++i) ASSERT_NEAR(y(0, h, i), full(k, h, i), 1e-12);
  }
}

TEST(Rope, OddHeadDimThrows) {
  Tensor<double> x({1, 1, 3});
  EXPECT_THROW(patchlens::rope_apply(x, 10000.0, 0), ConfigError);
}

TEST(Rope, BackwardMatchesFiniteDifferences) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto x = random_tensor({3, 2, 4}, 100 + seed);
    auto dy = random_like(x, 200 + seed);
    auto dx = patchlens::rope_backward(dy, 10000.0, 2);
    auto f = [&](const Tensor<double>& xx) {
      auto yy = patchlens::rope_apply(xx, 10000.0, 2);
      double s = 0;
      for (int64_t i = 0; i < yy.numel(); ++i) s += yy.data[i] * dy.data[i];
      return s;
    };
    ASSERT_LE(patchlens::grad_check(f, x, dx, 1e-4), 1e-6) << "seed " << seed;
  }
}

TEST(Matmul, IdentityIsExact) {
  auto a = random_tensor({4, 5}, 11);
  Tensor<double> eye({5, 5});
  for (int64_t i = 0; i < 5; ++i) eye(i, i) = 1.0;
  auto c = patchlens::matmul(a, eye);
  for (int64_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data[i], c.data[i]);
}

TEST(Matmul, BackwardMatchesFiniteDifferences) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto a = random_tensor({3, 4}, seed);
    auto b = random_tensor({4, 5}, 50 + seed);
    auto dc = random_tensor({3, 5}, 99 + seed);
    Tensor<double> da, db;
    patchlens::matmul_backward(a, b, dc, &da, &db);
    auto fa = [&](const Tensor<double>& aa) {
      auto c = patchlens::matmul(aa, b);
      double s = 0;
      for (int64_t i = 0; i < c.numel(); ++i) s += c.data[i] * dc.data[i];
      return s;
    };
    ASSERT_LE(patchlens::grad_check(fa, a, da, 1e-4), 1e-6) << "seed " << seed;
    auto fb = [&](const Tensor<double>& bb) {
      auto c = patchlens::matmul(a, bb);
      double s = 0;
      for (int64_t i = 0; i < c.numel(); ++i) s += c.data[i] * dc.data[i];
      return s;
    };
    ASSERT_LE(patchlens::grad_check(fb, b, db, 1e-4), 1e-6) << "seed " << seed;
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  const int64_t V = 11;
  Tensor<double> logits({3, V});
  std::vector<int> targets = {1, 5, 7};
  auto res = patchlens::cross_entropy(logits, targets, -1);
  EXPECT_NEAR(res.loss, std::log(static_cast<double>(V)), 1e-12);
}

TEST(CrossEntropy, LargeCorrectMarginDrivesLossToZero) {
  Tensor<double> logits({1, 4});
  logits(0, 2) = 50.0;
  std::vector<int> targets = {2};
  auto res = patchlens::cross_entropy(logits, targets, -1);
  EXPECT_LT(res.loss, 1e-9);
}

TEST(CrossEntropy, AllPositionsIgnoredThrows) {
  Tensor<double> logits({2, 4});
  std::vector<int> targets = {-1, -1};
  EXPECT_THROW(patchlens::cross_entropy(logits, targets, -1), ShapeError);
}

TEST(CrossEntropy, OutOfVocabTargetThrows) {
  Tensor<double> logits({1, 4});
  std::vector<int> targets = {9};
  EXPECT_THROW(patchlens::cross_entropy(logits, targets, -1), ShapeError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto logits = random_tensor({4, 6}, 700 + seed, 2.0);
    std::vector<int> targets = {2, -1, 0, 5};
    auto res = patchlens::cross_entropy(logits, targets, -1);
    auto f = [&](const Tensor<double>& ll) {
      return patchlens::cross_entropy(ll, targets, -1).loss;
    };
    ASSERT_LE(patchlens::grad_check(f, logits, res.dlogits, 1e-4), 1e-6) << "seed " << seed;
  }
}

TEST(GradCheck, QuadraticIsNearlyExact) {
  Tensor<double> x({1}, {3.0});
  Tensor<double> analytic({1}, {6.0});
  auto f = [](const Tensor<double>& t) { return t.data[0] * t.data[0]; };
  EXPECT_LE(patchlens::grad_check(f, x, analytic, 1e-3), 1e-7);
}

TEST(GradCheck, NonPositiveStepThrows) {
  Tensor<double> x({1}, {1.0});
  auto f = [](const Tensor<double>& t) { return t.data[0]; };
  EXPECT_THROW(patchlens::grad_check(f, x, x, 0.0), ConfigError);
}

TEST(GradCheck, NonFiniteFunctionThrows) {
  Tensor<double> x({1}, {0.0});
  Tensor<double> analytic({1}, {0.0});
  auto f = [](const Tensor<double>& t) { return std::log(t.data[0]); };
  EXPECT_THROW(patchlens::grad_check(f, x, analytic, 1e-3), ShapeError);
}
