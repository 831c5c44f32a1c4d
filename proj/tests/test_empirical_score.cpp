#include <gtest/gtest.h>

#include <cmath>

#include "sul/empirical_score.hpp"

using namespace sul;

namespace {

Dataset points_from(std::initializer_list<std::initializer_list<double>> rows) {
  Dataset ds;
  ds.points.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) ds.points(i, j++) = v;
    ++i;
  }
  return ds;
}

// Direct summation in long double without max-subtraction.
Vector naive_score(const Dataset& ds, const Vector& z, double t) {
  const long double a = 1.0L - t, s2 = static_cast<long double>(t) * t;
  long double total = 0.0L;
  std::vector<long double> mean(static_cast<std::size_t>(ds.dim()), 0.0L);
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    long double d2 = 0.0L;
    for (Eigen::Index j = 0; j < ds.dim(); ++j) {
      const long double diff = z[j] - a * ds.points(i, j);
      d2 += diff * diff;
    }
    const long double w = std::exp(-d2 / (2.0L * s2));
    total += w;
    for (Eigen::Index j = 0; j < ds.dim(); ++j) mean[static_cast<std::size_t>(j)] += w * ds.points(i, j);
  }
  Vector out(ds.dim());
  for (Eigen::Index j = 0; j < ds.dim(); ++j)
    out[j] = static_cast<double>((-z[j] + a * mean[static_cast<std::size_t>(j)] / total) / s2);
  return out;
}

double log_density(const Dataset& ds, const Vector& z, double t) {
  const double a = 1.0 - t, s2 = t * t;
  std::vector<double> logits(static_cast<std::size_t>(ds.size()));
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    logits[static_cast<std::size_t>(i)] = -(z - a * ds.points.row(i).transpose()).squaredNorm() / (2.0 * s2);
  return log_sum_exp(logits);
}

Dataset random_dataset(Rng& r, int n, int d, double scale) {
  Dataset ds;
  ds.points.resize(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) ds.points(i, j) = scale * r.normal();
  return ds;
}

}  // namespace

TEST(SoftmaxWeights, SingletonAndSymmetry) {
  const Dataset one = points_from({{0.3, -1.0}});
  EmpiricalScoreOracle o1(one);
  Vector z(2);
  z << 5.0, 5.0;
  const auto w1 = o1.softmax_weights(z, 0.3);
  ASSERT_EQ(w1.weights.size(), 1u);
  EXPECT_DOUBLE_EQ(w1.weights[0], 1.0);

  const Dataset two = points_from({{-2.0, 0.0}, {2.0, 0.0}});
  EmpiricalScoreOracle o2(two);
  Vector mid = Vector::Zero(2);
  const auto w2 = o2.softmax_weights(mid, 0.5);
  EXPECT_DOUBLE_EQ(w2.weights[0], 0.5);
  EXPECT_DOUBLE_EQ(w2.weights[1], 0.5);
}

TEST(SoftmaxWeights, TwoPointRatio) {
  const Dataset ds = points_from({{0.0}, {10.0}});
  EmpiricalScoreOracle o(ds);
  Vector z(1);
  z << 1.0;
  const auto w = o.softmax_weights(z, 0.5);
  // |1 - 5|^2 = 16, |1 - 0|^2 = 1, 2 sigma^2 = 0.5.
  const double expected = std::exp((16.0 - 1.0) / 0.5);
  EXPECT_NEAR(w.weights[0] / w.weights[1], expected, 1e-9 * expected);
}

TEST(SoftmaxWeights, StableForHugeCoordinates) {
  Rng r(4);
  const Dataset ds = random_dataset(r, 20, 3, 1e6);
  EmpiricalScoreOracle o(ds);
  for (int trial = 0; trial < 50; ++trial) {
    const Vector z = 1e6 * r.normal_vector(3);
    const auto w = o.softmax_weights(z, r.uniform(0.01, 1.0));
    double s = 0.0;
    for (double v : w.weights) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(SoftmaxWeights, SingularAtZero) {
  const Dataset ds = points_from({{0.0}});
  EmpiricalScoreOracle o(ds);
  EXPECT_THROW(o.softmax_weights(Vector::Zero(1), 0.0), SingularTimeError);
  EXPECT_THROW(o.score(Vector::Zero(1), 0.0), SingularTimeError);
  EXPECT_THROW(o.collapsed_score(Vector::Zero(1), 0.0), SingularTimeError);
}

TEST(EmpiricalScore, SingleComponent) {
  const Dataset ds = points_from({{0.0}});
  EmpiricalScoreOracle o(ds);
  Vector z(1);
  z << 1.0;
  EXPECT_DOUBLE_EQ(o.score(z, 0.5)[0], -4.0);
}

TEST(EmpiricalScore, ZeroAtComponentMeanWhenOthersFar) {
  const Dataset ds = points_from({{1.0, 2.0}, {1e4, 0.0}, {0.0, -1e4}});
  EmpiricalScoreOracle o(ds);
  const double t = 0.3;
  const Vector z = (1.0 - t) * ds.point(0);
  EXPECT_LT(o.score(z, t).norm(), 1e-12);
}

TEST(EmpiricalScore, MatchesNaiveSummation) {
  Rng r(7);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(r.index(8)), d = 1 + static_cast<int>(r.index(4));
    const Dataset ds = random_dataset(r, n, d, 1.0);
    EmpiricalScoreOracle o(ds);
    const double t = r.uniform(0.2, 1.0);
    const Vector z = (1.0 - t) * ds.point(static_cast<Eigen::Index>(r.index(static_cast<std::size_t>(n)))) +
                     t * r.normal_vector(d);
    const Vector ref = naive_score(ds, z, t);
    EXPECT_LT((o.score(z, t) - ref).norm(), 1e-10 * std::max(1.0, ref.norm()));
  }
}

TEST(EmpiricalScore, IsGradientOfLogDensity) {
  Rng r(8);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(r.index(6)), d = 1 + static_cast<int>(r.index(4));
    const Dataset ds = random_dataset(r, n, d, 1.0);
    EmpiricalScoreOracle o(ds);
    const double t = r.uniform(0.2, 0.9);
    const Vector z = (1.0 - t) * ds.point(0) + t * r.normal_vector(d);
    const Vector s = o.score(z, t);
    Vector fd(d);
    const double h = 1e-5;
    for (int j = 0; j < d; ++j) {
      Vector zp = z, zm = z;
      zp[j] += h;
      zm[j] -= h;
      fd[j] = (log_density(ds, zp, t) - log_density(ds, zm, t)) / (2 * h);
    }
    EXPECT_LT((s - fd).norm(), 1e-5 * std::max(1.0, s.norm()));
  }
}

TEST(EmpiricalScore, FullKnnEqualsExact) {
  Rng r(9);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(r.index(64)), d = 1 + static_cast<int>(r.index(6));
    const Dataset ds = random_dataset(r, n, d, 1.0);
    OracleOptions opts;
    opts.knn = n;
    EmpiricalScoreOracle exact(ds), knn(ds, {}, opts);
    const double t = r.uniform(0.05, 1.0);
    const Vector z = r.normal_vector(d);
    const Vector a = exact.score(z, t), b = knn.score(z, t);
    EXPECT_LT((a - b).norm(), 1e-12 * std::max(1.0, a.norm()));
  }
}

TEST(EmpiricalScore, KnnRestrictsToNearest) {
  const Dataset ds = points_from({{0.0}, {1.0}, {5.0}, {6.0}});
  OracleOptions opts;
  opts.knn = 2;
  EmpiricalScoreOracle o(ds, {}, opts);
  Vector z(1);
  z << 0.9 * 5.5;
  const auto w = o.softmax_weights(z, 0.1);
  EXPECT_EQ(w.indices, (std::vector<std::size_t>{2, 3}));
  opts.knn = 0;
  EXPECT_THROW(EmpiricalScoreOracle(ds, {}, opts), InvalidArgument);
  opts.knn = 5;
  EXPECT_THROW(EmpiricalScoreOracle(ds, {}, opts), InvalidArgument);
}

TEST(EmpiricalScore, FastDistancesAgree) {
  Rng r(10);
  const Dataset ds = random_dataset(r, 40, 8, 3.0);
  OracleOptions fast;
  fast.fast_distances = true;
  EmpiricalScoreOracle a(ds), b(ds, {}, fast);
  for (int trial = 0; trial < 200; ++trial) {
    const double t = r.uniform(0.001, 1.0);
    const Vector z = (1.0 - t) * ds.point(static_cast<Eigen::Index>(r.index(40))) + t * r.normal_vector(8);
    const Vector sa = a.score(z, t), sb = b.score(z, t);
    EXPECT_LT((sa - sb).norm(), 1e-6 * std::max(1.0, sa.norm()));
  }
}

TEST(CollapsedScore, SingletonEqualsExactAndTiesGoLow) {
  const Dataset one = points_from({{1.0, 1.0}});
  EmpiricalScoreOracle o(one);
  Vector z(2);
  z << 0.1, -0.4;
  EXPECT_LT((o.collapsed_score(z, 0.4).first - o.score(z, 0.4)).norm(), 1e-14);

  const Dataset two = points_from({{-1.0}, {1.0}});
  EmpiricalScoreOracle o2(two);
  EXPECT_EQ(o2.collapsed_score(Vector::Zero(1), 0.5).second, 0u);
}

TEST(CollapsedScore, MatchesExactOnSeparatedData) {
  Rng r(11);
  const int d = 8;
  const Dataset ds = random_dataset(r, 16, d, 30.0);
  EmpiricalScoreOracle o(ds);
  int good = 0, total = 0;
  for (double t : {0.05, 0.1, 0.2}) {
    for (int k = 0; k < 200; ++k) {
      const Vector z = (1 - t) * ds.point(static_cast<Eigen::Index>(r.index(16))) + t * r.normal_vector(d);
      const Vector exact = o.score(z, t);
      const Vector col = o.collapsed_score(z, t).first;
      good += (col - exact).norm() / exact.norm() < 1e-3;
      ++total;
    }
  }
  EXPECT_GE(good, total * 99 / 100);
}

TEST(ClassFilter, EmptyClassAndCfgGap) {
  Dataset ds = points_from({{-3.0, 0.0}, {-3.2, 0.5}, {3.0, 0.0}, {3.1, -0.4}});
  ds.labels = std::vector<int>{0, 0, 1, 1};
  ds.num_classes = 3;
  OracleOptions c0;
  c0.class_filter = 0;
  OracleOptions c2;
  c2.class_filter = 2;
  EXPECT_THROW(EmpiricalScoreOracle(ds, {}, c2), EmptyClassError);

  EmpiricalScoreOracle cond(ds, {}, c0), uncond(ds);
  const double t = 0.2;
  const Vector deep = (1 - t) * ds.point(0);
  EXPECT_LT(cfg_scores(cond, uncond, deep, t).gap, 1e-8);
  const Vector mid = Vector::Zero(2);
  EXPECT_GT(cfg_scores(cond, uncond, mid, 0.5).gap, 1.0);
  EXPECT_THROW(cfg_scores(uncond, uncond, mid, 0.5), InvalidArgument);
}

TEST(ClassFilter, SingleClassGapIsZero) {
  Rng r(12);
  Dataset ds = random_dataset(r, 10, 3, 1.0);
  ds.labels = std::vector<int>(10, 0);
  ds.num_classes = 1;
  OracleOptions c0;
  c0.class_filter = 0;
  EmpiricalScoreOracle cond(ds, {}, c0), uncond(ds);
  for (int k = 0; k < 50; ++k)
    EXPECT_EQ(cfg_scores(cond, uncond, r.normal_vector(3), r.uniform(0.01, 1.0)).gap, 0.0);
}
