#pragma once

// Exact score of the Gaussian-smoothed training set,
//   s(z, t) = (-z + alpha_t * sum_i w_i x_i) / sigma_t^2,
//   w = softmax(-|z - alpha_t x_i|^2 / (2 sigma_t^2)),
// with class-restricted, k-nearest-truncated and single-nearest (collapsed)
// variants.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "sul/dataset.hpp"
#include "sul/errors.hpp"
#include "sul/numerics.hpp"
#include "sul/schedule.hpp"

namespace sul {

struct OracleOptions {
  /// Restrict the mixture to the k components nearest to z; nullopt = all.
  std::optional<int> knn;
  /// Restrict the mixture to points with this label.
  std::optional<int> class_filter;
  /// Compute squared distances as |z|^2 + a^2|x|^2 - 2a x.z from cached norms.
  /// Falls back to direct differences when cancellation makes that inexact.
  bool fast_distances = false;
};

/// Normalised mixture weights over the active components. `indices` are row
/// indices into the parent dataset, ascending.
struct SoftmaxWeights {
  std::vector<double> weights;
  std::vector<std::size_t> indices;
};

class EmpiricalScoreOracle {
 public:
  EmpiricalScoreOracle(const Dataset& ds, Schedule sched = {}, OracleOptions opts = {})
      : sched_(sched), opts_(opts), parent_size_(static_cast<std::size_t>(ds.size())) {
    validate(ds);
    if (opts.class_filter) {
      if (!ds.labels) throw InvalidArgument("class filter requires a labeled dataset");
      indices_ = ds.class_indices(*opts.class_filter);
      if (indices_.empty())
        throw EmptyClassError("class " + std::to_string(*opts.class_filter) + " has no members");
    } else {
      indices_.resize(static_cast<std::size_t>(ds.size()));
      std::iota(indices_.begin(), indices_.end(), std::size_t{0});
    }
    points_.resize(static_cast<Eigen::Index>(indices_.size()), ds.dim());
    for (std::size_t k = 0; k < indices_.size(); ++k)
      points_.row(static_cast<Eigen::Index>(k)) = ds.points.row(static_cast<Eigen::Index>(indices_[k]));
    if (opts.knn && (*opts.knn < 1 || static_cast<std::size_t>(*opts.knn) > indices_.size()))
      throw InvalidArgument("knn truncation requires 1 <= k <= N");
    norms_ = points_.rowwise().squaredNorm();
  }

  const Schedule& schedule() const noexcept { return sched_; }
  const OracleOptions& options() const noexcept { return opts_; }
  const RowMatrix& points() const noexcept { return points_; }
  const std::vector<std::size_t>& indices() const noexcept { return indices_; }
  std::size_t parent_size() const noexcept { return parent_size_; }
  Eigen::Index dim() const noexcept { return points_.cols(); }
  std::size_t size() const noexcept { return indices_.size(); }

  /// |z - alpha x_k|^2 for every active component k.
  Vector squared_distances(const Vector& z, double t) const {
    if (z.size() != dim()) throw InvalidArgument("oracle: query dimension mismatch");
    const double a = sched_.alpha(t);
    if (opts_.fast_distances) {
      const double zz = z.squaredNorm();
      Vector d = (zz + a * a * norms_.array()).matrix() - 2.0 * a * (points_ * z);
      // Relative cancellation error is ~eps * (|z|^2 + a^2|x|^2) / d; recompute
      // directly when the smallest distance is not comfortably above it.
      const double scale = zz + a * a * norms_.maxCoeff();
      if (d.minCoeff() > 1e-6 * scale) return d;
    }
    return ((-a * points_).rowwise() + z.transpose()).rowwise().squaredNorm();
  }

  SoftmaxWeights softmax_weights(const Vector& z, double t) const {
    require_positive_sigma(t);
    const Vector d2 = squared_distances(z, t);
    const double inv2s2 = 1.0 / (2.0 * sched_.sigma(t) * sched_.sigma(t));
    std::vector<std::size_t> active = active_components(d2);
    SoftmaxWeights out;
    out.weights.resize(active.size());
    out.indices.resize(active.size());
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < active.size(); ++k) max_logit = std::max(max_logit, -d2[static_cast<Eigen::Index>(active[k])] * inv2s2);
    double total = 0.0;
    for (std::size_t k = 0; k < active.size(); ++k) {
      const double w = std::exp(-d2[static_cast<Eigen::Index>(active[k])] * inv2s2 - max_logit);
      out.weights[k] = w;
      total += w;
    }
    for (std::size_t k = 0; k < active.size(); ++k) {
      out.weights[k] /= total;
      out.indices[k] = indices_[active[k]];
    }
    return out;
  }

  /// Posterior mean of the clean point, sum_i w_i x_i (the x-prediction of s).
  Vector posterior_mean(const Vector& z, double t) const {
    require_positive_sigma(t);
    const Vector d2 = squared_distances(z, t);
    const double inv2s2 = 1.0 / (2.0 * sched_.sigma(t) * sched_.sigma(t));
    const auto active = active_components(d2);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (auto k : active) max_logit = std::max(max_logit, -d2[static_cast<Eigen::Index>(k)] * inv2s2);
    Vector mean = Vector::Zero(dim());
    double total = 0.0;
    for (auto k : active) {
      const double w = std::exp(-d2[static_cast<Eigen::Index>(k)] * inv2s2 - max_logit);
      mean += w * points_.row(static_cast<Eigen::Index>(k)).transpose();
      total += w;
    }
    return mean / total;
  }

  Vector score(const Vector& z, double t) const {
    const Vector m = posterior_mean(z, t);
    const double s = sched_.sigma(t);
    return (-z + sched_.alpha(t) * m) / (s * s);
  }

  /// Score of the single nearest component and its dataset index. Ties go to
  /// the lowest index.
  std::pair<Vector, std::size_t> collapsed_score(const Vector& z, double t) const {
    require_positive_sigma(t);
    const Vector d2 = squared_distances(z, t);
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < d2.size(); ++k)
      if (d2[k] < d2[best]) best = k;
    const double s = sched_.sigma(t);
    Vector sc = (-z + sched_.alpha(t) * points_.row(best).transpose()) / (s * s);
    return {std::move(sc), indices_[static_cast<std::size_t>(best)]};
  }

 private:
  void require_positive_sigma(double t) const {
    if (!(t > 0.0 && t <= 1.0)) {
      if (t == 0.0) throw SingularTimeError("empirical score is singular at sigma = 0", t);
      throw InvalidArgument("empirical score: t outside (0, 1]");
    }
  }

  // Positions (into points_) of the components entering the mixture, ascending.
  std::vector<std::size_t> active_components(const Vector& d2) const {
    std::vector<std::size_t> pos(static_cast<std::size_t>(d2.size()));
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    if (!opts_.knn || static_cast<std::size_t>(*opts_.knn) >= pos.size()) return pos;
    const auto k = static_cast<std::size_t>(*opts_.knn);
    auto closer = [&](std::size_t a, std::size_t b) {
      const double da = d2[static_cast<Eigen::Index>(a)], db = d2[static_cast<Eigen::Index>(b)];
      return da < db || (da == db && a < b);
    };
    std::nth_element(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k - 1), pos.end(), closer);
    pos.resize(k);
    std::sort(pos.begin(), pos.end());
    return pos;
  }

  Schedule sched_;
  OracleOptions opts_;
  std::size_t parent_size_;
  std::vector<std::size_t> indices_;
  RowMatrix points_;
  Vector norms_;
};

inline SoftmaxWeights softmax_weights(const EmpiricalScoreOracle& oracle, const Vector& z, double t) {
  return oracle.softmax_weights(z, t);
}

inline Vector empirical_score(const EmpiricalScoreOracle& oracle, const Vector& z, double t) {
  return oracle.score(z, t);
}

inline std::pair<Vector, std::size_t> collapsed_score(const EmpiricalScoreOracle& oracle, const Vector& z, double t) {
  return oracle.collapsed_score(z, t);
}

struct CfgScores {
  Vector conditional;
  Vector unconditional;
  double gap = 0.0;
};

/// Conditional and unconditional empirical scores and the norm of their
/// difference.
inline CfgScores cfg_scores(const EmpiricalScoreOracle& cond, const EmpiricalScoreOracle& uncond, const Vector& z,
                            double t) {
  if (!cond.options().class_filter) throw InvalidArgument("cfg_scores: conditional oracle needs a class filter");
  if (uncond.options().class_filter) throw InvalidArgument("cfg_scores: unconditional oracle must not filter classes");
  if (cond.dim() != uncond.dim() || cond.parent_size() != uncond.parent_size())
    throw InvalidArgument("cfg_scores: oracles do not share a dataset");
  CfgScores out{cond.score(z, t), uncond.score(z, t), 0.0};
  out.gap = (out.conditional - out.unconditional).norm();
  return out;
}

}  // namespace sul
