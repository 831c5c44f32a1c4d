#pragma once

// Region-conditional Monte Carlo estimators and the measurement suite:
// score errors, supervision loss, CFG gaps, memorization metrics, PAT sample
// classification and the supervision-loss / quality line fit.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sul/csv.hpp"
#include "sul/dataset.hpp"
#include "sul/errors.hpp"
#include "sul/geometry.hpp"
#include "sul/numerics.hpp"
#include "sul/sampling.hpp"
#include "sul/score_field.hpp"

namespace sul {

enum class Region { supervision, extrapolation };

inline std::string_view to_string(Region r) { return r == Region::supervision ? "supervision" : "extrapolation"; }

inline Region parse_region(std::string_view s) {
  if (s == "supervision" || s == "sup") return Region::supervision;
  if (s == "extrapolation" || s == "ext" || s == "inference") return Region::extrapolation;
  throw InvalidArgument("unknown region '" + std::string(s) + "'");
}

enum class Weighting { unit, lambda };

/// lambda(t) = t^2 / (1 - t)^2; turns squared score error into squared
/// velocity error under the linear schedule.
inline double lambda_weight(double t) {
  if (!(t >= 0.0 && t < 1.0)) throw InvalidArgument("lambda_weight: t outside [0, 1)");
  return t * t / ((1.0 - t) * (1.0 - t));
}

inline double weight(Weighting w, double t) { return w == Weighting::unit ? 1.0 : lambda_weight(t); }

struct RegionEstimate {
  Region region = Region::supervision;
  double value = 0.0;
  std::vector<std::pair<double, double>> curve;  // (t, weighted mean at t)
  int n = 0;
  int timesteps = 0;
  Weighting weighting = Weighting::unit;
};

/// Evaluates a quantity for all rows of z at one t.
using BatchQuantity = std::function<std::vector<double>(const RowMatrix& z, double t)>;
using PointQuantity = std::function<double(const Vector& z, double t)>;

inline BatchQuantity pointwise(PointQuantity q) {
  return [q = std::move(q)](const RowMatrix& z, double t) {
    std::vector<double> out(static_cast<std::size_t>(z.rows()));
    for (Eigen::Index i = 0; i < z.rows(); ++i) out[static_cast<std::size_t>(i)] = q(z.row(i).transpose(), t);
    return out;
  };
}

struct EstimatorConfig {
  int n = 1000;
  int timesteps = 100;
  Weighting weighting = Weighting::unit;
  std::uint64_t seed = 0;
  double t_min = 1e-3;
  SolverConfig solver{};
  std::optional<int> cls;  // class used when generating trajectories
};

/// Timesteps shared by every sample of one estimate, sorted descending. One
/// uniform draw per equal-width stratum of [t_min, 1 - t_min].
inline std::vector<double> estimator_timesteps(int count, double t_min, std::uint64_t seed) {
  Rng rng(seed, 0x71e5);
  std::vector<double> ts(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k)
    ts[static_cast<std::size_t>(k)] = t_min + (1.0 - 2.0 * t_min) * (k + rng.uniform()) / count;
  std::sort(ts.begin(), ts.end(), std::greater<>());
  return ts;
}

/// Inputs at which an estimator reads its quantity: for each timestep, an
/// n x d matrix of states. Supervision states are forward draws of fixed
/// (x, eps) pairs; extrapolation states are read along the field's own
/// sampling trajectories.
struct RegionInputs {
  std::vector<double> t;
  std::vector<RowMatrix> z;
};

inline RegionInputs region_inputs(Region region, const Dataset& ds, const ScoreField* field,
                                  const EstimatorConfig& cfg) {
  if (cfg.n < 1 || cfg.timesteps < 1) throw InvalidArgument("region estimate needs N >= 1 and T >= 1");
  validate(ds);
  RegionInputs in;
  in.t = estimator_timesteps(cfg.timesteps, cfg.t_min, cfg.seed);
  const Eigen::Index d = ds.dim();
  if (region == Region::supervision) {
    Rng rng(cfg.seed, 0x5c9a);
    RowMatrix x(cfg.n, d), eps(cfg.n, d);
    for (int i = 0; i < cfg.n; ++i) {
      x.row(i) = ds.points.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(ds.size()))));
      eps.row(i) = rng.normal_vector(d).transpose();
    }
    Schedule sched = field ? field->schedule() : Schedule{};
    for (double t : in.t) in.z.push_back(sched.alpha(t) * x + sched.sigma(t) * eps);
  } else {
    if (!field) throw InvalidArgument("extrapolation region needs a field to generate trajectories");
    if (field->dim() != d) throw InvalidArgument("field and dataset dimensions differ");
    SolverConfig sc = cfg.solver;
    sc.t_min = cfg.t_min;
    const SampleResult run = sample(*field, cfg.n, sc, cfg.seed, true, cfg.cls);
    for (double t : in.t) {
      RowMatrix z(cfg.n, d);
      for (int i = 0; i < cfg.n; ++i) z.row(i) = run.trajectories[static_cast<std::size_t>(i)].at(t).transpose();
      in.z.push_back(std::move(z));
    }
  }
  return in;
}

inline RegionEstimate estimate_on(const RegionInputs& in, Region region, const BatchQuantity& q,
                                  const EstimatorConfig& cfg) {
  RegionEstimate est;
  est.region = region;
  est.n = cfg.n;
  est.timesteps = cfg.timesteps;
  est.weighting = cfg.weighting;
  CompensatedSum total;
  for (std::size_t k = 0; k < in.t.size(); ++k) {
    const double t = in.t[k];
    const double w = weight(cfg.weighting, t);
    const std::vector<double> vals = q(in.z[k], t);
    if (vals.size() != static_cast<std::size_t>(in.z[k].rows())) throw InvalidArgument("quantity returned wrong count");
    CompensatedSum at_t;
    for (double v : vals) at_t.add(w * v);
    total.add(at_t.value());
    est.curve.emplace_back(t, at_t.value() / static_cast<double>(vals.size()));
  }
  est.value = total.value() / (static_cast<double>(cfg.n) * static_cast<double>(cfg.timesteps));
  return est;
}

/// Mean of lambda(t) q(z, t) (or q itself for unit weighting) over N samples
/// x T timesteps drawn in the given region.
inline RegionEstimate estimate_region(const BatchQuantity& q, Region region, const Dataset& ds,
                                      const ScoreField* trajectory_field, const EstimatorConfig& cfg) {
  return estimate_on(region_inputs(region, ds, trajectory_field, cfg), region, q, cfg);
}

inline RegionEstimate estimate_region(const PointQuantity& q, Region region, const Dataset& ds,
                                      const ScoreField* trajectory_field, const EstimatorConfig& cfg) {
  return estimate_region(pointwise(q), region, ds, trajectory_field, cfg);
}

/// Squared score difference per row at one t.
inline std::vector<double> score_sq_diff(const ScoreField& a, const ScoreField& b, const RowMatrix& z, double t,
                                         std::optional<int> cls = std::nullopt) {
  const std::vector<double> ts(static_cast<std::size_t>(z.rows()), t);
  std::vector<int> cs;
  if (cls) cs.assign(static_cast<std::size_t>(z.rows()), *cls);
  const RowMatrix pa = a.evaluate_batch(z, ts, cs);
  const RowMatrix pb = b.evaluate_batch(z, ts, cs);
  std::vector<double> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Vector zi = z.row(i).transpose();
    const Vector sa = convert_value(a.schedule(), a.kind(), pa.row(i).transpose(), zi, t, PredictionKind::score);
    const Vector sb = convert_value(b.schedule(), b.kind(), pb.row(i).transpose(), zi, t, PredictionKind::score);
    out[static_cast<std::size_t>(i)] = (sa - sb).squaredNorm();
  }
  return out;
}

/// lambda-weighted |s_field - s_ref|^2 over the region. Extrapolation inputs
/// come from trajectories of `field` itself.
inline RegionEstimate score_error(const ScoreField& field, const ScoreField& reference, Region region,
                                  const Dataset& ds, EstimatorConfig cfg) {
  cfg.weighting = Weighting::lambda;
  BatchQuantity q = [&](const RowMatrix& z, double t) { return score_sq_diff(field, reference, z, t); };
  return estimate_region(q, region, ds, &field, cfg);
}

/// Supervision-region score error against the empirical oracle over ds.
inline double supervision_loss(const ScoreField& field, const Dataset& ds, int n = 1000, int timesteps = 100,
                               std::uint64_t seed = 0) {
  OracleField oracle(ds, field.schedule());
  EstimatorConfig cfg;
  cfg.n = n;
  cfg.timesteps = timesteps;
  cfg.seed = seed;
  return score_error(field, oracle, Region::supervision, ds, cfg).value;
}

struct GapSummary {
  double t = 0.0;
  double median = 0.0;
  double p10 = 0.0;
  double p90 = 0.0;
  double mean_score_norm = 0.0;  // mean |s_cond| at the same inputs
};

struct CfgGapConfig {
  std::vector<double> t_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  int n = 200;
  std::uint64_t seed = 0;
  SolverConfig solver{};
  /// Classes to pool over; empty means every class present in the dataset.
  std::vector<int> classes;
};

/// Distribution of |s(z, t | c) - s(z, t | null)| over region inputs. In the
/// supervision region z is a forward draw from a class-c point; in the
/// extrapolation region z is read along class-c sampling trajectories of the
/// conditional field.
inline std::vector<GapSummary> cfg_gap_curve(const ScoreField& cond, const ScoreField& uncond, Region region,
                                             const Dataset& ds, const CfgGapConfig& cfg) {
  if (!ds.labels) throw InvalidArgument("cfg_gap_curve needs class labels");
  if (cfg.n < 1 || cfg.t_grid.empty()) throw InvalidArgument("cfg_gap_curve needs n >= 1 and a t grid");
  for (double t : cfg.t_grid)
    if (!(t > 0.0 && t < 1.0)) throw InvalidArgument("cfg gap grid must lie in (0, 1)");
  std::vector<int> classes = cfg.classes;
  if (classes.empty())
    for (int c = 0; c < ds.num_classes; ++c)
      if (!ds.class_indices(c).empty()) classes.push_back(c);
  const Eigen::Index d = ds.dim();
  const Schedule sched = cond.schedule();

  std::vector<std::vector<double>> gaps(cfg.t_grid.size()), norms(cfg.t_grid.size());
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    const int c = classes[ci];
    const auto members = ds.class_indices(c);
    if (members.empty()) throw EmptyClassError("class " + std::to_string(c) + " has no members");
    std::vector<RowMatrix> inputs;
    if (region == Region::supervision) {
      Rng rng(cfg.seed, 0xc6a0 + static_cast<std::uint64_t>(c));
      RowMatrix x(cfg.n, d), eps(cfg.n, d);
      for (int i = 0; i < cfg.n; ++i) {
        x.row(i) = ds.points.row(static_cast<Eigen::Index>(members[rng.index(members.size())]));
        eps.row(i) = rng.normal_vector(d).transpose();
      }
      for (double t : cfg.t_grid) inputs.push_back(sched.alpha(t) * x + sched.sigma(t) * eps);
    } else {
      SolverConfig sc = cfg.solver;
      const SampleResult run = sample(cond, cfg.n, sc, cfg.seed + 7919 * static_cast<std::uint64_t>(c), true, c);
      for (double t : cfg.t_grid) {
        RowMatrix z(cfg.n, d);
        for (int i = 0; i < cfg.n; ++i) z.row(i) = run.trajectories[static_cast<std::size_t>(i)].at(t).transpose();
        inputs.push_back(std::move(z));
      }
    }
    for (std::size_t k = 0; k < cfg.t_grid.size(); ++k) {
      const double t = cfg.t_grid[k];
      const RowMatrix& z = inputs[k];
      const std::vector<double> ts(static_cast<std::size_t>(z.rows()), t);
      const std::vector<int> cc(static_cast<std::size_t>(z.rows()), c), cn(static_cast<std::size_t>(z.rows()), -1);
      const RowMatrix pc = cond.evaluate_batch(z, ts, cc);
      const RowMatrix pu = uncond.evaluate_batch(z, ts, cn);
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const Vector zi = z.row(i).transpose();
        const Vector sc = convert_value(sched, cond.kind(), pc.row(i).transpose(), zi, t, PredictionKind::score);
        const Vector su = convert_value(uncond.schedule(), uncond.kind(), pu.row(i).transpose(), zi, t, PredictionKind::score);
        gaps[k].push_back((sc - su).norm());
        norms[k].push_back(sc.norm());
      }
    }
  }

  std::vector<GapSummary> out;
  for (std::size_t k = 0; k < cfg.t_grid.size(); ++k) {
    GapSummary g;
    g.t = cfg.t_grid[k];
    g.median = quantile(gaps[k], 0.5);
    g.p10 = quantile(gaps[k], 0.1);
    g.p90 = quantile(gaps[k], 0.9);
    g.mean_score_norm = compensated_mean(norms[k]);
    out.push_back(g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Memorization

/// |x - x'(1)|^2 / mean_{i<=n} |x - x'(i)|^2 over the n nearest subset points.
/// 0 means the sample coincides with a subset point.
inline double calibrated_l2(const Vector& sample, const RowMatrix& subset, int n) {
  if (n < 1 || n > subset.rows()) throw InvalidArgument("calibrated_l2: n must lie in [1, subset size]");
  if (sample.size() != subset.cols()) throw InvalidArgument("calibrated_l2: dimension mismatch");
  std::vector<double> d2(static_cast<std::size_t>(subset.rows()));
  for (Eigen::Index i = 0; i < subset.rows(); ++i)
    d2[static_cast<std::size_t>(i)] = (subset.row(i).transpose() - sample).squaredNorm();
  std::partial_sort(d2.begin(), d2.begin() + n, d2.end());
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += d2[static_cast<std::size_t>(i)];
  mean /= n;
  if (mean == 0.0) return 0.0;
  return d2[0] / mean;
}

inline std::vector<double> calibrated_l2_all(const RowMatrix& samples, const RowMatrix& subset, int n) {
  std::vector<double> out(static_cast<std::size_t>(samples.rows()));
  for (Eigen::Index i = 0; i < samples.rows(); ++i)
    out[static_cast<std::size_t>(i)] = calibrated_l2(samples.row(i).transpose(), subset, n);
  return out;
}

/// Fraction of samples whose calibrated distance falls below the threshold.
inline double memorization_ratio(const RowMatrix& samples, const RowMatrix& subset, int n, double threshold = 1.0 / 3.0) {
  if (samples.rows() < 1) throw InvalidArgument("memorization_ratio: no samples");
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidArgument("memorization_ratio: threshold must lie in (0, 1)");
  const auto c = calibrated_l2_all(samples, subset, n);
  const auto hits = std::count_if(c.begin(), c.end(), [&](double v) { return v < threshold; });
  return static_cast<double>(hits) / static_cast<double>(c.size());
}

inline std::size_t nearest_index(const Vector& z, const RowMatrix& points) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const double v = (points.row(i).transpose() - z).squaredNorm();
    if (v < bd) {
      bd = v;
      best = static_cast<std::size_t>(i);
    }
  }
  return best;
}

/// Fraction of outputs whose nearest dataset point is their origin.
inline double regress_to_origin_ratio(const std::vector<std::size_t>& origins, const RowMatrix& outputs,
                                      const Dataset& ds) {
  if (origins.empty() || static_cast<Eigen::Index>(origins.size()) != outputs.rows())
    throw InvalidArgument("regress_to_origin_ratio: need one output per origin");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < origins.size(); ++i)
    if (nearest_index(outputs.row(static_cast<Eigen::Index>(i)).transpose(), ds.points) == origins[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(origins.size());
}

// ---------------------------------------------------------------------------
// PAT sample classification

/// "bad": on the Euclidean bridge |x| < bridge_x, |y| < bridge_y.
/// "good": not bad and radius within [ring_inner, ring_outer].
/// "other": everything else.
struct PatRule {
  double bridge_x = 0.15;
  double bridge_y = 0.1;
  double ring_inner = 0.05;
  double ring_outer = 1.15;
};

enum class PatClass { bad, good, other };

inline PatClass classify_pat(double x, double y, const PatRule& rule = {}) {
  if (std::abs(x) < rule.bridge_x && std::abs(y) < rule.bridge_y) return PatClass::bad;
  const double r = std::hypot(x, y);
  if (r >= rule.ring_inner && r <= rule.ring_outer) return PatClass::good;
  return PatClass::other;
}

struct PatQuality {
  double bad = 0.0;
  double good = 0.0;
  double other = 0.0;
};

inline PatQuality pat_quality(const RowMatrix& samples, const PatRule& rule = {}) {
  if (samples.cols() != 2) throw InvalidArgument("pat_quality needs 2-D samples");
  if (samples.rows() < 1) throw InvalidArgument("pat_quality: no samples");
  std::size_t counts[3] = {0, 0, 0};
  for (Eigen::Index i = 0; i < samples.rows(); ++i) ++counts[static_cast<int>(classify_pat(samples(i, 0), samples(i, 1), rule))];
  const double n = static_cast<double>(samples.rows());
  return {counts[0] / n, counts[1] / n, counts[2] / n};
}

// ---------------------------------------------------------------------------
// Supervision loss vs. quality

struct QualityPoint {
  double supervision_loss = 0.0;
  double quality = 0.0;
  std::string tag;
};

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double residual = 0.0;  // root of the residual sum of squares
};

/// Ordinary least squares of quality on supervision loss.
inline LineFit fit_quality_line(const std::vector<QualityPoint>& pts) {
  if (pts.size() < 2) throw InvalidArgument("fit_quality_line needs at least two points");
  double mx = 0.0, my = 0.0;
  for (const auto& p : pts) {
    if (!std::isfinite(p.supervision_loss) || !std::isfinite(p.quality)) throw NumericInputError("non-finite quality point");
    mx += p.supervision_loss;
    my += p.quality;
  }
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  double sxx = 0.0, sxy = 0.0;
  for (const auto& p : pts) {
    sxx += (p.supervision_loss - mx) * (p.supervision_loss - mx);
    sxy += (p.supervision_loss - mx) * (p.quality - my);
  }
  double scale = 0.0;
  for (const auto& p : pts) scale = std::max(scale, std::abs(p.supervision_loss));
  if (!(sxx > 1e-28 * std::max(1.0, scale * scale) * static_cast<double>(pts.size())))
    throw RankDeficiencyError("fit_quality_line: supervision losses are all equal", 1);
  LineFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double rss = 0.0;
  for (const auto& p : pts) {
    const double r = p.quality - (fit.slope * p.supervision_loss + fit.intercept);
    rss += r * r;
  }
  fit.residual = std::sqrt(rss);
  return fit;
}

// ---------------------------------------------------------------------------
// r* along trajectories

/// r* at each grid time along each trajectory; rows are (t, sample, r*).
struct RStarRow {
  double t;
  int sample;
  double r_star;
};

inline std::vector<RStarRow> rstar_profile(const Dataset& ds, const std::vector<Trajectory>& trajs,
                                           const std::vector<double>& grid, const Schedule& sched = {}) {
  std::vector<RStarRow> rows;
  for (double t : grid)
    for (std::size_t i = 0; i < trajs.size(); ++i)
      rows.push_back({t, static_cast<int>(i), r_star(ds, trajs[i].at(t), t, sched).r_star});
  return rows;
}

// ---------------------------------------------------------------------------
// CSV rows: metric, region, t, value, n, seed

struct MetricRow {
  std::string metric;
  std::string region;
  std::optional<double> t;
  double value = 0.0;
  long long n = 0;
  std::uint64_t seed = 0;
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  CsvWriter w({"metric", "region", "t", "value", "n", "seed"});
  for (const auto& r : rows) {
    w.cell(r.metric).cell(r.region);
    if (r.t)
      w.cell(*r.t);
    else
      w.cell("all");
    w.cell(r.value).cell(static_cast<std::int64_t>(r.n)).cell(static_cast<unsigned long long>(r.seed));
    w.end_row();
  }
  return w.str();
}

inline void append_estimate(std::vector<MetricRow>& rows, const std::string& metric, const RegionEstimate& e,
                            std::uint64_t seed, bool per_t = true) {
  const long long n = static_cast<long long>(e.n) * e.timesteps;
  rows.push_back({metric, std::string(to_string(e.region)), std::nullopt, e.value, n, seed});
  if (per_t)
    for (const auto& [t, v] : e.curve) rows.push_back({metric, std::string(to_string(e.region)), t, v, e.n, seed});
}

}  // namespace sul
