#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "ccfa/numerics.hpp"

using namespace ccfa;

namespace {

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, HandArithmetic) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{0}, {1}};
  EXPECT_EQ(matmul(a, b), (Matrix{{2}, {4}}));
}

TEST(Matmul, AgreesWithTripleLoop) {
  Rng rng(11);
  const Matrix a = rng.normal_matrix(5, 7), b = rng.normal_matrix(7, 3);
  EXPECT_LE(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, AgreesWithTripleLoopUpTo64) {
  Rng rng(12);
  for (std::size_t n : {1u, 8u, 33u, 64u}) {
    const Matrix a = rng.normal_matrix(n, 64), b = rng.normal_matrix(64, n);
    const Matrix ref = naive_matmul(a, b);
    const Matrix got = matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i)
      EXPECT_LE(std::abs(got.data()[i] - ref.data()[i]), 1e-12 * std::max(1.0, std::abs(ref.data()[i])));
  }
}

TEST(Matmul, TransposedVariantsMatchExplicitTranspose) {
  Rng rng(13);
  const Matrix a = rng.normal_matrix(4, 6), b = rng.normal_matrix(5, 6), c = rng.normal_matrix(4, 3);
  EXPECT_LE(max_abs_diff(matmul_bt(a, b), naive_matmul(a, transpose(b))), 1e-12);
  EXPECT_LE(max_abs_diff(matmul_at(a, c), naive_matmul(transpose(a), c)), 1e-12);
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(4, 5));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4x5"), std::string::npos) << msg;
  }
}

TEST(RowNormalize, ThreeFourFive) {
  const Matrix z = row_normalize(Matrix{{3, 4}});
  EXPECT_DOUBLE_EQ(z(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(z(0, 1), 0.8);
}

TEST(RowNormalize, UnitRowUnchanged) {
  const Matrix u{{1, 0, 0}, {0, 0.6, 0.8}};
  EXPECT_EQ(row_normalize(u), u);
}

TEST(RowNormalize, ZeroRowFlaggedAndUntouched) {
  const auto r = row_normalize_flagged(Matrix{{0, 0}, {1, 1}}, 1e-12);
  EXPECT_TRUE(r.degenerate[0]);
  EXPECT_FALSE(r.degenerate[1]);
  EXPECT_EQ(r.values(0, 0), 0.0);
  EXPECT_EQ(r.values(0, 1), 0.0);
}

TEST(RowNormalize, Idempotent) {
  Rng rng(3);
  const Matrix once = row_normalize(rng.normal_matrix(20, 9));
  EXPECT_LE(max_abs_diff(row_normalize(once), once), 1e-14);
}

TEST(RowNormalize, BackwardMatchesFiniteDifferences) {
  Rng rng(4);
  const Matrix z = rng.normal_matrix(3, 4);
  const Matrix w = rng.normal_matrix(3, 4);
  const auto loss = [&](const Matrix& p) {
    const Matrix u = row_normalize(p);
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u.data()[i] * w.data()[i];
    return s;
  };
  const auto grad = [&](const Matrix& p) { return row_normalize_backward(row_normalize_flagged(p), w); };
  EXPECT_LT(finite_diff_check(loss, grad, z).max_rel_err, 1e-7);
}

TEST(FiniteDiff, QuadraticIsExact) {
  Rng rng(5);
  const auto loss = [](const Matrix& p) {
    double s = 0.0;
    for (double v : p.data()) s += v * v;
    return s;
  };
  const auto grad = [](const Matrix& p) { return p * 2.0; };
  const auto rep = finite_diff_check(loss, grad, rng.normal_matrix(4, 5));
  EXPECT_LT(rep.max_rel_err, 1e-8);
  EXPECT_EQ(rep.probe_count, 20u);
}

TEST(FiniteDiff, NonFiniteLossNamesCoordinate) {
  const auto loss = [](const Matrix& p) { return p(1, 0) > 1.0 ? std::nan("") : 0.0; };
  const auto grad = [](const Matrix& p) { return Matrix(p.rows(), p.cols()); };
  try {
    finite_diff_check(loss, grad, Matrix{{0, 0}, {1, 0}});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("(1, 0)"), std::string::npos) << e.what();
  }
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  const auto f = [](const Matrix&) { return 0.0; };
  const auto g = [](const Matrix& p) { return p; };
  EXPECT_THROW(finite_diff_check(f, g, Matrix(1, 1), 0.0), std::invalid_argument);
}

TEST(RngTest, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(RngTest, FrozenFirstOutputs) {
  // Pins the generator so that a platform or refactor change is caught.
  Rng r(0);
  const std::uint64_t first = r.next_u64();
  Rng again(0);
  EXPECT_EQ(first, again.next_u64());
  EXPECT_EQ(detail::splitmix64(0), 0xE220A8397B1DCDAFULL);
}

TEST(RngTest, DerivedStreamsAreIndependentOfConsumption) {
  Rng a(7);
  const Rng child_before = a.derive("x");
  for (int i = 0; i < 10; ++i) a.next_u64();
  Rng c1 = child_before, c2 = a.derive("x");
  EXPECT_EQ(c1.next_u64(), c2.next_u64());
  Rng d1 = Rng(7).derive("x"), d2 = Rng(7).derive("y");
  EXPECT_NE(d1.next_u64(), d2.next_u64());
  Rng e1 = Rng(7).derive(0), e2 = Rng(7).derive(1);
  EXPECT_NE(e1.next_u64(), e2.next_u64());
}

TEST(RngTest, UniformAndBelowRanges) {
  Rng r(9);
  std::set<std::size_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const std::size_t k = r.below(5);
    EXPECT_LT(k, 5u);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 5u);
  EXPECT_THROW(r.below(0), std::invalid_argument);
}

TEST(RngTest, NormalMoments) {
  Rng r(10);
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(RngTest, ShuffleIsPermutation) {
  Rng r(1);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  r.shuffle(v);
  std::set<int> s(v.begin(), v.end());
  EXPECT_EQ(s.size(), 50u);
}

TEST(Helpers, ArgmaxTiesGoLow) {
  const std::vector<double> v{1.0, 3.0, 3.0, 2.0};
  EXPECT_EQ(argmax(v), 1u);
}

TEST(Helpers, SoftmaxStableAndNormalised) {
  const std::vector<double> v{1000.0, 1000.0, -1000.0};
  const auto p = softmax(v);
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.5, 1e-15);
  EXPECT_EQ(p[2], 0.0);
}

TEST(Helpers, VconcatStacksRows) {
  const Matrix a{{1, 2}}, b{{3, 4}, {5, 6}};
  EXPECT_EQ(vconcat(a, b), (Matrix{{1, 2}, {3, 4}, {5, 6}}));
  EXPECT_EQ(vconcat(Matrix(), b), b);
  EXPECT_THROW(vconcat(a, Matrix(1, 3)), DimensionError);
}

TEST(Helpers, RaggedInitialiserRejected) {
  EXPECT_THROW((Matrix{{1, 2}, {3}}), DimensionError);
}
