#pragma once

// Forward interpolant z_t = alpha_t x + sigma_t eps and the linear relations
// between score, velocity and clean-sample (x) predictions.

#include <cmath>
#include <string>
#include <string_view>

#include "sul/errors.hpp"
#include "sul/numerics.hpp"

namespace sul {

enum class ScheduleKind { linear };

struct Schedule {
  ScheduleKind kind = ScheduleKind::linear;

  double alpha(double t) const noexcept { return 1.0 - t; }
  double sigma(double t) const noexcept { return t; }
  double alpha_dot(double /*t*/) const noexcept { return -1.0; }
  double sigma_dot(double /*t*/) const noexcept { return 1.0; }
  /// alpha_t^2 + sigma_t^2, the marginal variance scale of N(0, I) data.
  double variance_scale(double t) const noexcept {
    const double a = alpha(t), s = sigma(t);
    return a * a + s * s;
  }
};

enum class PredictionKind { score, velocity, x_pred };

inline std::string_view to_string(PredictionKind k) {
  switch (k) {
    case PredictionKind::score: return "score";
    case PredictionKind::velocity: return "velocity";
    case PredictionKind::x_pred: return "x-pred";
  }
  return "?";
}

inline PredictionKind parse_prediction_kind(std::string_view s) {
  if (s == "score") return PredictionKind::score;
  if (s == "velocity" || s == "v-pred") return PredictionKind::velocity;
  if (s == "x-pred" || s == "x_pred" || s == "x") return PredictionKind::x_pred;
  throw InvalidArgument("unknown prediction kind '" + std::string(s) + "'");
}

struct Prediction {
  PredictionKind kind = PredictionKind::score;
  Vector value;
};

inline void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("time outside [0, 1]: " + std::to_string(t));
}

inline Vector forward_process(const Schedule& sched, const Vector& x, const Vector& eps, double t) {
  if (x.size() != eps.size()) throw InvalidArgument("forward_process: dimension mismatch");
  check_time(t);
  return sched.alpha(t) * x + sched.sigma(t) * eps;
}

namespace detail {

// Every kind is an affine function of the score at fixed (z, t):
//   x-pred   = (z + sigma^2 s) / alpha
//   velocity = alpha' x + sigma' (z - alpha x) / sigma
// so conversions go through the score. The linear schedule reduces these to
// x = t^2/(1-t) s + z/(1-t) and v = -t/(1-t) s - z/(1-t).
inline Vector to_score(const Schedule& sc, PredictionKind from, const Vector& value, const Vector& z, double t) {
  const double a = sc.alpha(t), s = sc.sigma(t);
  switch (from) {
    case PredictionKind::score:
      return value;
    case PredictionKind::x_pred:
      return (a * value - z) / (s * s);
    case PredictionKind::velocity: {
      // v = (alpha' - sigma' alpha / sigma) x + (sigma'/sigma) z
      const double cx = sc.alpha_dot(t) - sc.sigma_dot(t) * a / s;
      const Vector x = (value - (sc.sigma_dot(t) / s) * z) / cx;
      return (a * x - z) / (s * s);
    }
  }
  return value;
}

inline Vector from_score(const Schedule& sc, PredictionKind to, const Vector& score, const Vector& z, double t) {
  const double a = sc.alpha(t), s = sc.sigma(t);
  switch (to) {
    case PredictionKind::score:
      return score;
    case PredictionKind::x_pred:
      return (z + s * s * score) / a;
    case PredictionKind::velocity: {
      const Vector x = (z + s * s * score) / a;
      return sc.alpha_dot(t) * x + sc.sigma_dot(t) * (z - a * x) / s;
    }
  }
  return score;
}

}  // namespace detail

/// Re-expresses `p` as `target` at (z, t). Conversions between distinct kinds
/// divide by sigma_t and alpha_t, so t must lie strictly inside (0, 1).
inline Prediction convert(const Schedule& sched, const Prediction& p, const Vector& z, double t,
                          PredictionKind target) {
  if (p.value.size() != z.size()) throw InvalidArgument("convert: dimension mismatch");
  if (p.kind == target) return p;
  if (!(t > 0.0 && t < 1.0)) throw SingularTimeError("prediction conversion is singular at this time", t);
  Vector s = detail::to_score(sched, p.kind, p.value, z, t);
  return {target, detail::from_score(sched, target, s, z, t)};
}

inline Vector convert_value(const Schedule& sched, PredictionKind from, const Vector& value, const Vector& z,
                            double t, PredictionKind to) {
  return convert(sched, Prediction{from, value}, z, t, to).value;
}

/// Exact marginal score of N(0, I) data pushed through the interpolant:
/// -z / (alpha_t^2 + sigma_t^2).
inline Vector marginal_gaussian_score(const Schedule& sched, const Vector& z, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw InvalidArgument("marginal_gaussian_score: t must lie in (0, 1]");
  return -z / sched.variance_scale(t);
}

}  // namespace sul
