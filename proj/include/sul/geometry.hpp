#pragma once

// Supervision-region geometry: membership in the union of noise shells,
// the nearest-shell distance ratio r*, and the worst-case Bhattacharyya
// overlap between mixture components.

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

struct ShellMembership {
  bool inside = false;
  std::size_t nearest_index = 0;
  double band_halfwidth = 0.0;   // sigma_t * sqrt(d log(1/delta))
  double radial_residual = 0.0;  // | |z - alpha x_i| - sigma_t sqrt(d) | at nearest_index
};

struct RStar {
  double r_star = 0.0;
  std::size_t i_star = 0;
};

namespace detail {
inline void require_open_time(double t) {
  if (t == 0.0) throw SingularTimeError("shell geometry is degenerate at sigma = 0", t);
  if (!(t > 0.0 && t <= 1.0)) throw InvalidArgument("t outside (0, 1]");
}

inline Vector shell_distances(const Dataset& ds, const Vector& z, double t, const Schedule& sched) {
  if (z.size() != ds.dim()) throw InvalidArgument("query dimension mismatch");
  return ((-sched.alpha(t) * ds.points).rowwise() + z.transpose()).rowwise().norm();
}
}  // namespace detail

/// z lies in the supervision region when some shell residual
/// | |z - alpha_t x_i| - sigma_t sqrt(d) | is within sigma_t sqrt(d log(1/delta)).
inline ShellMembership in_supervision_region(const Dataset& ds, const Vector& z, double t, double delta,
                                             const Schedule& sched = {}) {
  if (!(delta > 0.0 && delta < 1.0)) throw InvalidArgument("delta must lie in (0, 1)");
  detail::require_open_time(t);
  const double d = static_cast<double>(ds.dim());
  const double radius = sched.sigma(t) * std::sqrt(d);
  const Vector dist = detail::shell_distances(ds, z, t, sched);
  ShellMembership out;
  out.band_halfwidth = sched.sigma(t) * std::sqrt(d * std::log(1.0 / delta));
  out.radial_residual = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < dist.size(); ++i) {
    const double r = std::abs(dist[i] - radius);
    if (r < out.radial_residual) {
      out.radial_residual = r;
      out.nearest_index = static_cast<std::size_t>(i);
    }
  }
  out.inside = out.radial_residual <= out.band_halfwidth;
  return out;
}

/// r_i = |z - alpha_t x_i| / (sigma_t sqrt(d)); r* = r_{i*}, i* = argmin |r_i - 1|.
inline RStar r_star(const Dataset& ds, const Vector& z, double t, const Schedule& sched = {}) {
  detail::require_open_time(t);
  const Vector dist = detail::shell_distances(ds, z, t, sched);
  const double norm = sched.sigma(t) * std::sqrt(static_cast<double>(ds.dim()));
  RStar out;
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < dist.size(); ++i) {
    const double r = dist[i] / norm;
    if (std::abs(r - 1.0) < best) {
      best = std::abs(r - 1.0);
      out = {r, static_cast<std::size_t>(i)};
    }
  }
  return out;
}

/// Smallest squared distance between two distinct rows (optionally within one
/// class). This is the only data statistic the overlap coefficient needs.
inline double min_pairwise_sq_distance(const Dataset& ds, std::optional<int> class_filter = std::nullopt) {
  std::vector<std::size_t> idx;
  if (class_filter) {
    if (!ds.labels) throw InvalidArgument("class filter requires a labeled dataset");
    idx = ds.class_indices(*class_filter);
  } else {
    idx.resize(static_cast<std::size_t>(ds.size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  if (idx.size() < 2) throw UndefinedOverlapError("overlap needs at least two points");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b)
      best = std::min(best, (ds.points.row(static_cast<Eigen::Index>(idx[a])) -
                             ds.points.row(static_cast<Eigen::Index>(idx[b]))).squaredNorm());
  return best;
}

inline double overlap_from_min_distance(double min_sq_dist, double t, const Schedule& sched = {}) {
  detail::require_open_time(t);
  const double a = sched.alpha(t), s = sched.sigma(t);
  return std::exp(-a * a * min_sq_dist / (8.0 * s * s));
}

/// C(t) = max_{i != j} exp(-alpha_t^2 |x_i - x_j|^2 / (8 sigma_t^2)).
inline double bhattacharyya_overlap(const Dataset& ds, double t, std::optional<int> class_filter = std::nullopt,
                                    const Schedule& sched = {}) {
  detail::require_open_time(t);
  return overlap_from_min_distance(min_pairwise_sq_distance(ds, class_filter), t, sched);
}

inline std::vector<std::pair<double, double>> overlap_curve(const Dataset& ds, const std::vector<double>& ts,
                                                            std::optional<int> class_filter = std::nullopt,
                                                            const Schedule& sched = {}) {
  const double m = min_pairwise_sq_distance(ds, class_filter);
  std::vector<std::pair<double, double>> out;
  out.reserve(ts.size());
  for (double t : ts) out.emplace_back(t, overlap_from_min_distance(m, t, sched));
  return out;
}

inline std::vector<std::pair<double, double>> trajectory_rstar_profile(
    const Dataset& ds, const std::vector<std::pair<double, Vector>>& trajectory, const Schedule& sched = {}) {
  if (trajectory.empty()) throw InvalidArgument("empty trajectory");
  std::vector<std::pair<double, double>> out;
  out.reserve(trajectory.size());
  for (const auto& [t, z] : trajectory) out.emplace_back(t, r_star(ds, z, t, sched).r_star);
  return out;
}

}  // namespace sul
