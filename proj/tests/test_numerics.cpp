#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "sul/numerics.hpp"

using namespace sul;

TEST(Rng, SameSeedAndStreamReproduce) {
  Rng a(42, 3), b(42, 3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  Rng c(42, 4);
  Rng d(42, 3);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += c.next() == d.next();
  EXPECT_EQ(same, 0);
}

TEST(Rng, SubstreamsDiffer) {
  Rng base(7, 1);
  Rng s0 = base.substream(0), s1 = base.substream(1), s0b = base.substream(0);
  EXPECT_NE(s0.next(), s1.next());
  Rng s0c = base.substream(0);
  s0b.next();
  EXPECT_EQ(s0b.next(), (s0c.next(), s0c.next()));
}

TEST(Rng, UniformAndIndexRanges) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.index(7), 7u);
  }
  EXPECT_THROW(r.index(0), InvalidArgument);
}

TEST(Rng, GaussianMomentsAtHundredThousand) {
  Rng r(2024, 9);
  constexpr int n = 100000;
  constexpr int coords = 4;
  for (int j = 0; j < coords; ++j) {
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = r.normal();
      s += x;
      s2 += x * x;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    EXPECT_LT(std::abs(mean), 4.0 / std::sqrt(static_cast<double>(n)));
    EXPECT_LT(std::abs(var - 1.0), 0.05);
  }
}

TEST(Rng, SampleWithoutReplacementIsDistinct) {
  Rng r(5);
  std::vector<std::size_t> pool(50);
  std::iota(pool.begin(), pool.end(), 0);
  const auto pick = sample_without_replacement(pool, 20, r);
  EXPECT_EQ(pick.size(), 20u);
  EXPECT_EQ(std::set<std::size_t>(pick.begin(), pick.end()).size(), 20u);
}

TEST(LogSumExp, Examples) {
  const std::vector<double> zero{0.0};
  EXPECT_DOUBLE_EQ(log_sum_exp(zero), 0.0);
  const std::vector<double> pair{3.5, 3.5};
  EXPECT_NEAR(log_sum_exp(pair), 3.5 + std::log(2.0), 1e-15);
  const std::vector<double> big{1000.0, 1000.0};
  EXPECT_NEAR(log_sum_exp(big), 1000.0 + std::log(2.0), 1e-12);
  EXPECT_THROW(log_sum_exp(std::vector<double>{}), InvalidArgument);
}

TEST(LogSumExp, ShiftEquivariance) {
  Rng r(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + r.index(20));
    for (auto& x : v) x = r.uniform(-50.0, 50.0);
    const double c = r.uniform(-1e3, 1e3);
    std::vector<double> w = v;
    for (auto& x : w) x += c;
    const double lhs = log_sum_exp(w), rhs = log_sum_exp(v) + c;
    EXPECT_NEAR(lhs, rhs, 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(rhs)));
  }
}

TEST(CompensatedSum, RecoversCancellation) {
  std::vector<double> v{1e16, 1.0, -1e16, 1.0};
  EXPECT_DOUBLE_EQ(compensated_sum(v), 2.0);
}

TEST(Quantile, Interpolates) {
  std::vector<double> v{4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(quantile(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile(v, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(quantile(v, 0.5), 2.5);
}

TEST(CholeskySolve, IdentityAndTwoByTwo) {
  Matrix eye = Matrix::Identity(5, 5);
  Vector b = Vector::LinSpaced(5, 1.0, 5.0);
  EXPECT_LT((cholesky_solve(eye, b) - b).norm(), 1e-15);

  Matrix a(2, 2);
  a << 2, 1, 1, 2;
  Vector rhs(2);
  rhs << 3, 3;
  const Vector x = cholesky_solve(a, rhs);
  EXPECT_NEAR(x[0], 1.0, 1e-15);
  EXPECT_NEAR(x[1], 1.0, 1e-15);
}

TEST(CholeskySolve, RandomSpdResidual) {
  Rng r(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 5 + static_cast<int>(r.index(60));
    Matrix b(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) b(i, j) = r.normal();
    Matrix a = b.transpose() * b + Matrix::Identity(n, n);
    Vector rhs = r.normal_vector(n);
    const Vector x = cholesky_solve(a, rhs);
    EXPECT_LT((a * x - rhs).norm() / rhs.norm(), 1e-10);
  }
}

TEST(CholeskySolve, NonSpdReportsPivot) {
  Matrix a(3, 3);
  a << 1, 0, 0, 0, 1, 0, 0, 0, -1;
  try {
    Cholesky c(a);
    FAIL() << "expected rank deficiency";
  } catch (const RankDeficiencyError& e) {
    EXPECT_EQ(e.pivot(), 2u);
  }
  Matrix dup = Matrix::Ones(2, 2);
  EXPECT_THROW(Cholesky{dup}, RankDeficiencyError);
}

TEST(SlicedWasserstein, Examples) {
  Rng r(8);
  RowMatrix a(30, 3);
  for (int i = 0; i < 30; ++i) a.row(i) = r.normal_vector(3).transpose();
  EXPECT_DOUBLE_EQ(sliced_wasserstein(a, a, 16, 1), 0.0);

  RowMatrix p(1, 1), q(1, 1);
  p << 0.0;
  q << 1.0;
  EXPECT_NEAR(sliced_wasserstein(p, q, 8, 2), 1.0, 1e-15);

  RowMatrix wrong(4, 2);
  EXPECT_THROW(sliced_wasserstein(a, wrong, 4, 0), InvalidArgument);
}

TEST(SlicedWasserstein, TranslationMatchesExpectedProjection) {
  // For identical shapes the projected distance is |<v, u>|, whose mean over
  // uniform directions on S^{d-1} is |v| * Gamma(d/2) / (sqrt(pi) Gamma((d+1)/2)).
  Rng r(10);
  const int d = 3;
  RowMatrix a(40, d);
  for (int i = 0; i < 40; ++i) a.row(i) = r.normal_vector(d).transpose();
  Vector v(d);
  v << 0.3, -0.4, 1.2;
  RowMatrix b = a.rowwise() + v.transpose();
  const double sw = sliced_wasserstein(a, b, 20000, 4);
  const double expected = v.norm() * std::tgamma(d / 2.0) / (std::sqrt(M_PI) * std::tgamma((d + 1) / 2.0));
  EXPECT_LE(sw, v.norm() + 1e-12);
  EXPECT_NEAR(sw, expected, 0.02 * v.norm());
}

TEST(SlicedWasserstein, SymmetricAndZeroOnlyForEqualMultisets) {
  RowMatrix a(3, 2), b(3, 2), c(3, 2);
  a << 0, 0, 1, 0, 0, 1;
  b << 0, 1, 0, 0, 1, 0;  // same multiset, permuted
  c << 0, 0, 1, 0, 0, 1.5;
  EXPECT_NEAR(sliced_wasserstein(a, b, 32, 0), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(sliced_wasserstein(a, c, 32, 0), sliced_wasserstein(c, a, 32, 0));
  EXPECT_GT(sliced_wasserstein(a, c, 32, 0), 0.0);
}

TEST(Wasserstein1d, UnequalSizes) {
  // {0} vs {0, 2}: F - G is 1/2 on [0, 2).
  EXPECT_NEAR(wasserstein1_1d({0.0}, {0.0, 2.0}), 1.0, 1e-15);
}

TEST(ParallelFor, ResultsIndependentOfThreadCount) {
  std::vector<double> one(100), four(100);
  set_max_threads(1);
  parallel_for(100, [&](std::size_t i) { one[i] = std::sin(static_cast<double>(i)); });
  set_max_threads(4);
  parallel_for(100, [&](std::size_t i) { four[i] = std::sin(static_cast<double>(i)); });
  set_max_threads(1);
  EXPECT_EQ(one, four);
}

TEST(ParallelFor, PropagatesExceptions) {
  set_max_threads(3);
  EXPECT_THROW(parallel_for(10, [](std::size_t i) {
                 if (i == 5) throw NumericFailure("boom");
               }),
               NumericFailure);
  set_max_threads(1);
}
