#pragma once

// Shared numeric substrate: RNG streams, Gaussian draws, log-sum-exp,
// compensated sums, a Cholesky solver, sliced 1-Wasserstein distance and a
// deterministic parallel_for.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <numbers>
#include <numeric>
#include <span>
#include <thread>
#include <vector>

#include "sul/errors.hpp"

namespace sul {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// RNG

inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// xoshiro256** seeded through splitmix64. A (seed, stream) pair identifies a
/// reproducible substream; streams with different indices are decorrelated by
/// hashing the index into the seed material.
///
/// Gaussian draws use the Box-Muller transform and cache the second
/// variate, so the sequence of normal() values is fixed for a given stream.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream) {
    std::uint64_t sm = seed;
    std::uint64_t mix = stream * 0xD1B54A32D192ED03ULL + 0x632BE59BD9B4E019ULL;
    std::uint64_t stream_hash = splitmix64(mix);
    sm ^= stream_hash;
    for (auto& s : s_) s = splitmix64(sm);
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  /// Independent child stream derived from this generator's identity.
  Rng substream(std::uint64_t index) const noexcept {
    std::uint64_t sm = stream_ ^ (index * 0x9E3779B97F4A7C15ULL + 0x7F4A7C15ULL);
    return Rng(seed_, splitmix64(sm));
  }

  result_type operator()() noexcept { return next(); }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::index: empty range");
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t r;
    do {
      r = next();
    } while (r >= limit);
    return r % n;
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  Vector normal_vector(Eigen::Index d) {
    Vector v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = normal();
    return v;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t s_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// k distinct indices drawn uniformly from `pool` (partial Fisher-Yates).
inline std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> pool,
                                                           std::size_t k, Rng& rng) {
  if (k > pool.size()) throw InvalidArgument("sample_without_replacement: k exceeds pool size");
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.index(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

// ---------------------------------------------------------------------------
// Reductions

inline double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw InvalidArgument("log_sum_exp: empty input");
  const double m = *std::max_element(values.begin(), values.end());
  if (std::isinf(m)) return m;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - m);
  return m + std::log(acc);
}

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline double compensated_sum(std::span<const double> values) noexcept {
  CompensatedSum s;
  for (double v : values) s.add(v);
  return s.value();
}

inline double compensated_mean(std::span<const double> values) {
  if (values.empty()) throw InvalidArgument("mean of empty range");
  return compensated_sum(values) / static_cast<double>(values.size());
}

/// Linear-interpolated quantile of an unsorted sample, q in [0, 1].
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidArgument("quantile of empty range");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

// ---------------------------------------------------------------------------
// Dense linear algebra

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// A pivot that is not safely positive relative to the largest diagonal entry
/// is reported as rank deficiency.
class Cholesky {
 public:
  explicit Cholesky(const Matrix& a) : l_(RowMatrix::Zero(a.rows(), a.cols())) {
    if (a.rows() != a.cols()) throw InvalidArgument("Cholesky: matrix is not square");
    const Eigen::Index n = a.rows();
    const double scale = n > 0 ? a.diagonal().cwiseAbs().maxCoeff() : 0.0;
    const double tol = static_cast<double>(std::max<Eigen::Index>(n, 1)) *
                       std::numeric_limits<double>::epsilon() * scale;
    for (Eigen::Index j = 0; j < n; ++j) {
      double diag = a(j, j) - l_.row(j).head(j).squaredNorm();
      if (!(diag > tol)) throw RankDeficiencyError("matrix is not positive definite", static_cast<std::size_t>(j));
      const double ljj = std::sqrt(diag);
      l_(j, j) = ljj;
      for (Eigen::Index i = j + 1; i < n; ++i)
        l_(i, j) = (a(i, j) - l_.row(i).head(j).dot(l_.row(j).head(j))) / ljj;
    }
  }

  const RowMatrix& factor() const noexcept { return l_; }

  Matrix solve(const Matrix& rhs) const {
    if (rhs.rows() != l_.rows()) throw InvalidArgument("Cholesky::solve: dimension mismatch");
    Matrix y = l_.triangularView<Eigen::Lower>().solve(rhs);
    return l_.transpose().triangularView<Eigen::Upper>().solve(y);
  }

 private:
  RowMatrix l_;
};

/// Solves A x = b for SPD A; one step of iterative refinement keeps the
/// relative residual near machine precision on well-conditioned systems.
inline Matrix cholesky_solve(const Matrix& a, const Matrix& rhs) {
  if (a.rows() != a.cols() || a.rows() != rhs.rows())
    throw InvalidArgument("cholesky_solve: dimension mismatch");
  if (!a.isApprox(a.transpose(), 1e-12)) throw InvalidArgument("cholesky_solve: matrix is not symmetric");
  Cholesky chol(a);
  Matrix x = chol.solve(rhs);
  Matrix residual = rhs - a * x;
  x += chol.solve(residual);
  return x;
}

inline Vector cholesky_solve(const Matrix& a, const Vector& rhs) {
  Matrix b = rhs;
  return cholesky_solve(a, b).col(0);
}

// ---------------------------------------------------------------------------
// Sliced 1-Wasserstein

/// W1 between two 1-D empirical distributions as the integral of |F - G|.
/// For equal sizes this equals the mean absolute difference of sorted values.
inline double wasserstein1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw InvalidArgument("wasserstein1_1d: empty input");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double wa = 1.0 / static_cast<double>(a.size());
  const double wb = 1.0 / static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double fa = 0.0, fb = 0.0;
  double prev = std::min(a.front(), b.front());
  CompensatedSum total;
  while (i < a.size() || j < b.size()) {
    double x;
    if (j >= b.size() || (i < a.size() && a[i] <= b[j]))
      x = a[i];
    else
      x = b[j];
    total.add(std::abs(fa - fb) * (x - prev));
    while (i < a.size() && a[i] == x) {
      fa += wa;
      ++i;
    }
    while (j < b.size() && b[j] == x) {
      fb += wb;
      ++j;
    }
    prev = x;
  }
  return total.value();
}

/// Mean over random unit directions of W1 between the projected point sets.
/// Rows are points.
inline double sliced_wasserstein(const RowMatrix& a, const RowMatrix& b, int projections,
                                 std::uint64_t seed) {
  if (a.cols() != b.cols()) throw InvalidArgument("sliced_wasserstein: dimension mismatch");
  if (a.rows() == 0 || b.rows() == 0) throw InvalidArgument("sliced_wasserstein: empty point set");
  if (projections < 1) throw InvalidArgument("sliced_wasserstein: projections must be >= 1");
  Rng rng(seed, 0x5317);
  CompensatedSum total;
  std::vector<double> pa(static_cast<std::size_t>(a.rows())), pb(static_cast<std::size_t>(b.rows()));
  for (int p = 0; p < projections; ++p) {
    Vector dir = rng.normal_vector(a.cols());
    double n = dir.norm();
    while (n == 0.0) {
      dir = rng.normal_vector(a.cols());
      n = dir.norm();
    }
    dir /= n;
    for (Eigen::Index i = 0; i < a.rows(); ++i) pa[static_cast<std::size_t>(i)] = a.row(i).dot(dir);
    for (Eigen::Index i = 0; i < b.rows(); ++i) pb[static_cast<std::size_t>(i)] = b.row(i).dot(dir);
    total.add(wasserstein1_1d(pa, pb));
  }
  return total.value() / projections;
}

// ---------------------------------------------------------------------------
// Threading

namespace detail {
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{1};
  return cap;
}
}  // namespace detail

inline void set_max_threads(int n) { detail::thread_cap().store(std::max(1, n)); }
inline int max_threads() { return detail::thread_cap().load(); }

/// Runs fn(i) for i in [0, n). Work items must write to disjoint outputs;
/// callers reduce afterwards in index order, so results do not depend on the
/// thread count. The first exception thrown by any item is rethrown.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n && !failed.load(); i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed.store(true);
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace sul
