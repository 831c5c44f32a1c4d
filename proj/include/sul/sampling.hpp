#pragma once

// Probability-flow ODE dz/dt = v(z, t), integrated from noise (t near 1) down
// to data (t near 0). Adaptive Dormand-Prince 5(4), Heun and Euler.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sul/errors.hpp"
#include "sul/numerics.hpp"
#include "sul/score_field.hpp"

namespace sul {

enum class SolverKind { rk45, heun, euler };

inline std::string_view to_string(SolverKind k) {
  switch (k) {
    case SolverKind::rk45: return "adaptive-rk45";
    case SolverKind::heun: return "fixed-heun";
    case SolverKind::euler: return "fixed-euler";
  }
  return "?";
}

inline SolverKind parse_solver_kind(std::string_view s) {
  if (s == "adaptive-rk45" || s == "rk45" || s == "dopri5") return SolverKind::rk45;
  if (s == "fixed-heun" || s == "heun") return SolverKind::heun;
  if (s == "fixed-euler" || s == "euler") return SolverKind::euler;
  throw InvalidArgument("unknown solver '" + std::string(s) + "'");
}

struct SolverConfig {
  SolverKind kind = SolverKind::rk45;
  double atol = 1e-6;
  double rtol = 1e-3;
  int max_steps = 100000;
  int fixed_steps = 100;
  double t_min = 1e-3;
  double t_start = 1.0 - 1e-3;
  double t_end = 1e-3;

  void validate() const {
    if (!(t_min > 0.0 && t_min < 0.5)) throw InvalidArgument("solver t_min must lie in (0, 0.5)");
    if (!(t_start > t_end && t_end >= t_min)) throw InvalidArgument("solver needs t_start > t_end >= t_min");
    if (t_start > 1.0 - t_min) throw InvalidArgument("solver t_start must be <= 1 - t_min");
    if (!(atol > 0.0 && rtol > 0.0)) throw InvalidArgument("solver tolerances must be positive");
    if (max_steps < 1 || fixed_steps < 1) throw InvalidArgument("solver step counts must be positive");
  }
};

struct Trajectory {
  std::vector<double> t;
  std::vector<Vector> z;
  int steps = 0;
  int accepted = 0;
  int rejected = 0;

  /// State at time s by linear interpolation between recorded states.
  Vector at(double s) const {
    if (t.empty()) throw InvalidArgument("empty trajectory");
    if (s >= t.front()) return z.front();
    if (s <= t.back()) return z.back();
    // t is strictly decreasing.
    auto it = std::lower_bound(t.begin(), t.end(), s, [](double a, double b) { return a > b; });
    const auto k = static_cast<std::size_t>(it - t.begin());
    if (t[k] == s) return z[k];
    const double w = (t[k - 1] - s) / (t[k - 1] - t[k]);
    return (1.0 - w) * z[k - 1] + w * z[k];
  }
};

struct IntegrationResult {
  Vector z;
  std::optional<Trajectory> trajectory;
  int accepted = 0;
  int rejected = 0;
};

namespace detail {

inline Vector velocity_of(const ScoreField& f, const Vector& z, double t, std::optional<int> cls) {
  Vector v = f.evaluate_as(PredictionKind::velocity, z, t, cls);
  if (!v.allFinite()) throw NumericFailure("non-finite velocity at t = " + std::to_string(t));
  return v;
}

inline double error_norm(const Vector& err, const Vector& z0, const Vector& z1, double atol, double rtol) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < err.size(); ++i) {
    const double scale = atol + rtol * std::max(std::abs(z0[i]), std::abs(z1[i]));
    m = std::max(m, std::abs(err[i]) / scale);
  }
  return m;
}

// Dormand-Prince 5(4) tableau.
struct Dopri {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
};

}  // namespace detail

/// Integrates from cfg.t_start down to cfg.t_end. The adaptive solver accepts
/// a step when max_i |err_i| / (atol + rtol |z_i|) <= 1.
inline IntegrationResult integrate(const ScoreField& field, const Vector& z_init, const SolverConfig& cfg,
                                   bool record = false, std::optional<int> cls = std::nullopt) {
  cfg.validate();
  if (z_init.size() != field.dim()) throw InvalidArgument("integrate: initial state dimension mismatch");
  if (!z_init.allFinite()) throw NumericInputError("integrate: non-finite initial state");

  IntegrationResult res;
  Trajectory traj;
  auto push = [&](double t, const Vector& z) {
    if (record) {
      traj.t.push_back(t);
      traj.z.push_back(z);
    }
  };
  auto fail_if_nonfinite = [&](const Vector& z, double t) {
    if (!z.allFinite()) throw NumericFailure("non-finite state at t = " + std::to_string(t));
  };

  Vector z = z_init;
  double t = cfg.t_start;
  const double t1 = cfg.t_end;
  push(t, z);

  if (cfg.kind != SolverKind::rk45) {
    const int n = cfg.fixed_steps;
    const double h = (t1 - t) / n;
    for (int k = 0; k < n; ++k) {
      const double ta = cfg.t_start + k * h;
      const double tb = k + 1 == n ? t1 : cfg.t_start + (k + 1) * h;
      const Vector va = detail::velocity_of(field, z, ta, cls);
      if (cfg.kind == SolverKind::euler) {
        z = z + (tb - ta) * va;
      } else {
        const Vector zp = z + (tb - ta) * va;
        const Vector vb = detail::velocity_of(field, zp, tb, cls);
        z = z + 0.5 * (tb - ta) * (va + vb);
      }
      fail_if_nonfinite(z, tb);
      push(tb, z);
    }
    res.accepted = n;
  } else {
    using D = detail::Dopri;
    const double span = t - t1;
    Vector k1 = detail::velocity_of(field, z, t, cls);

    // Initial step: the usual two-derivative estimate, max-norm scaled.
    double h;
    {
      Vector scale = (cfg.atol + cfg.rtol * z.array().abs()).matrix();
      const double d0 = (z.array() / scale.array()).abs().maxCoeff();
      const double d1 = (k1.array() / scale.array()).abs().maxCoeff();
      double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
      h0 = std::min(h0, span);
      const Vector z1 = z - h0 * k1;
      const Vector k2 = detail::velocity_of(field, z1, t - h0, cls);
      const double d2 = ((k2 - k1).array() / scale.array()).abs().maxCoeff() / h0;
      if (d1 <= 1e-15 && d2 <= 1e-15) {
        h = span;  // locally stationary: try the whole interval
      } else {
        const double h1 = std::max(d1, d2) <= 1e-15 ? std::max(1e-6, h0 * 1e-3)
                                                    : std::pow(0.01 / std::max(d1, d2), 1.0 / 5.0);
        h = std::min({100.0 * h0, h1, span});
      }
    }

    constexpr double safety = 0.9, grow = 5.0, shrink = 0.2;
    int steps = 0;
    while (t > t1) {
      if (steps >= cfg.max_steps) {
        std::vector<double> last(z.data(), z.data() + z.size());
        throw DivergenceError("integrate: exceeded max_steps = " + std::to_string(cfg.max_steps), t, std::move(last));
      }
      ++steps;
      const bool last_step = h >= t - t1;
      const double hs = last_step ? t - t1 : h;
      const double dt = -hs;  // integrating toward smaller t
      const Vector k2 = detail::velocity_of(field, z + dt * (D::a21 * k1), t + D::c2 * dt, cls);
      const Vector k3 = detail::velocity_of(field, z + dt * (D::a31 * k1 + D::a32 * k2), t + D::c3 * dt, cls);
      const Vector k4 =
          detail::velocity_of(field, z + dt * (D::a41 * k1 + D::a42 * k2 + D::a43 * k3), t + D::c4 * dt, cls);
      const Vector k5 = detail::velocity_of(
          field, z + dt * (D::a51 * k1 + D::a52 * k2 + D::a53 * k3 + D::a54 * k4), t + D::c5 * dt, cls);
      const Vector k6 = detail::velocity_of(
          field, z + dt * (D::a61 * k1 + D::a62 * k2 + D::a63 * k3 + D::a64 * k4 + D::a65 * k5), t + dt, cls);
      const Vector zn = z + dt * (D::b1 * k1 + D::b3 * k3 + D::b4 * k4 + D::b5 * k5 + D::b6 * k6);
      const double tn = last_step ? t1 : t + dt;
      const Vector k7 = detail::velocity_of(field, zn, tn, cls);
      const Vector err = dt * (D::e1 * k1 + D::e3 * k3 + D::e4 * k4 + D::e5 * k5 + D::e6 * k6 + D::e7 * k7);
      const double en = detail::error_norm(err, z, zn, cfg.atol, cfg.rtol);
      if (!std::isfinite(en)) throw NumericFailure("non-finite error estimate at t = " + std::to_string(t));
      if (en <= 1.0) {
        t = tn;
        z = zn;
        k1 = k7;
        fail_if_nonfinite(z, t);
        push(t, z);
        ++res.accepted;
        const double factor = en == 0.0 ? grow : std::clamp(safety * std::pow(en, -0.2), shrink, grow);
        h = hs * factor;
      } else {
        ++res.rejected;
        h = hs * std::max(shrink, safety * std::pow(en, -0.2));
      }
    }
  }

  res.z = z;
  if (record) {
    traj.accepted = res.accepted;
    traj.rejected = res.rejected;
    traj.steps = res.accepted + res.rejected;
    res.trajectory = std::move(traj);
  }
  return res;
}

struct SampleResult {
  RowMatrix samples;
  std::vector<Trajectory> trajectories;
};

/// Initial noise for sample i of a run with this seed.
inline Vector initial_noise(std::uint64_t seed, std::size_t i, Eigen::Index d) {
  Rng rng = Rng(seed, 0x5a3e).substream(i);
  return rng.normal_vector(d);
}

/// n samples from N(0, I) noise integrated from 1 - t_min to t_min.
inline SampleResult sample(const ScoreField& field, int n, const SolverConfig& cfg, std::uint64_t seed,
                           bool record = false, std::optional<int> cls = std::nullopt) {
  if (n < 1) throw InvalidArgument("sample: n must be >= 1");
  SolverConfig c = cfg;
  c.t_start = 1.0 - cfg.t_min;
  c.t_end = cfg.t_min;
  const Eigen::Index d = field.dim();
  SampleResult out;
  out.samples.resize(n, d);
  std::vector<IntegrationResult> results(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    try {
      results[i] = integrate(field, initial_noise(seed, i, d), c, record, cls);
    } catch (const DivergenceError& e) {
      throw DivergenceError("sample " + std::to_string(i) + ": " + e.what(), e.last_time(), e.last_state());
    } catch (const NumericFailure& e) {
      throw NumericFailure("sample " + std::to_string(i) + ": " + e.what());
    }
  });
  for (std::size_t i = 0; i < results.size(); ++i) {
    out.samples.row(static_cast<Eigen::Index>(i)) = results[i].z.transpose();
    if (record) out.trajectories.push_back(std::move(*results[i].trajectory));
  }
  return out;
}

/// Integrates the given noisy state from t_from down to t_min.
inline Vector denoise_from(const ScoreField& field, const Vector& z_t, double t_from, const SolverConfig& cfg,
                           std::optional<int> cls = std::nullopt) {
  if (!(t_from >= cfg.t_min && t_from <= 1.0)) throw InvalidArgument("denoise_from: t_from outside [t_min, 1]");
  if (t_from == cfg.t_min) return z_t;
  SolverConfig c = cfg;
  c.t_start = std::min(t_from, 1.0 - cfg.t_min);
  c.t_end = cfg.t_min;
  return integrate(field, z_t, c, false, cls).z;
}

}  // namespace sul
