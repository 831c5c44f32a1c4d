#pragma once

// Gaussian-kernel ridge regression, used as a non-parametric denoiser:
// features of (z_t, t) -> clean x.

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "sul/dataset.hpp"
#include "sul/errors.hpp"
#include "sul/mlp.hpp"
#include "sul/numerics.hpp"
#include "sul/schedule.hpp"
#include "sul/score_field.hpp"

namespace sul {

class KrrDenoiser {
 public:
  KrrDenoiser() = default;

  /// Solves (K + ridge I) C = Y with K_ij = exp(-gamma |a_i - a_j|^2).
  static KrrDenoiser fit(RowMatrix inputs, RowMatrix targets, double gamma, double ridge) {
    if (inputs.rows() < 1) throw InvalidArgument("krr_fit: no samples");
    if (inputs.rows() != targets.rows()) throw InvalidArgument("krr_fit: input and target counts differ");
    if (!(gamma > 0.0)) throw InvalidArgument("krr_fit: gamma must be positive");
    if (!(ridge >= 0.0)) throw InvalidArgument("krr_fit: ridge must be non-negative");
    if (!inputs.allFinite() || !targets.allFinite()) throw NumericInputError("krr_fit: non-finite sample");

    KrrDenoiser k;
    k.gamma_ = gamma;
    k.ridge_ = ridge;
    k.inputs_ = std::move(inputs);
    const Matrix gram = k.gram();
    Matrix system = gram;
    system.diagonal().array() += ridge;
    Cholesky chol(system);
    const Matrix y = targets;
    Matrix c = chol.solve(y);
    c += chol.solve(y - system * c);
    k.coeff_ = c;
    const double ynorm = y.norm();
    k.residual_ = ynorm > 0.0 ? (system * c - y).norm() / ynorm : (system * c).norm();
    if (!(k.residual_ < 1e-8))
      throw NumericFailure("krr_fit: relative residual " + std::to_string(k.residual_) + " exceeds 1e-8");
    return k;
  }

  Vector predict(const Vector& query) const {
    if (query.size() != inputs_.cols()) throw InvalidArgument("krr_predict: feature dimension mismatch");
    const Vector d2 = (inputs_.rowwise() - query.transpose()).rowwise().squaredNorm();
    const Vector kq = (-gamma_ * d2.array()).exp().matrix();
    return coeff_.transpose() * kq;
  }

  Eigen::Index feature_dim() const noexcept { return inputs_.cols(); }
  Eigen::Index target_dim() const noexcept { return coeff_.cols(); }
  Eigen::Index size() const noexcept { return inputs_.rows(); }
  double gamma() const noexcept { return gamma_; }
  double ridge() const noexcept { return ridge_; }
  double residual() const noexcept { return residual_; }
  const RowMatrix& inputs() const noexcept { return inputs_; }
  const Matrix& coefficients() const noexcept { return coeff_; }

  Matrix gram() const {
    const Eigen::Index n = inputs_.rows();
    Matrix k(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      k(i, i) = 1.0;
      for (Eigen::Index j = 0; j < i; ++j) {
        const double v = std::exp(-gamma_ * (inputs_.row(i) - inputs_.row(j)).squaredNorm());
        k(i, j) = v;
        k(j, i) = v;
      }
    }
    return k;
  }

 private:
  double gamma_ = 1.0;
  double ridge_ = 0.0;
  double residual_ = 0.0;
  RowMatrix inputs_;
  Matrix coeff_;
};

inline KrrDenoiser krr_fit(const std::vector<std::pair<Vector, Vector>>& samples, double gamma, double ridge) {
  if (samples.empty()) throw InvalidArgument("krr_fit: no samples");
  const auto f = samples.front().first.size(), d = samples.front().second.size();
  RowMatrix in(static_cast<Eigen::Index>(samples.size()), f), out(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].first.size() != f || samples[i].second.size() != d)
      throw InvalidArgument("krr_fit: inconsistent sample dimensions");
    in.row(static_cast<Eigen::Index>(i)) = samples[i].first.transpose();
    out.row(static_cast<Eigen::Index>(i)) = samples[i].second.transpose();
  }
  return KrrDenoiser::fit(std::move(in), std::move(out), gamma, ridge);
}

inline Vector krr_predict(const KrrDenoiser& k, const Vector& query) { return k.predict(query); }

struct KrrFieldConfig {
  InputMap input_map = InputMap::identity;  // identity or polar
  double gamma = 10.0;
  double ridge = 1e-4;
  double time_scale = 1.0;
  int samples = 1024;
  double t_min = 1e-3;
};

/// x-prediction field backed by a kernel ridge regressor on features of
/// (z_t, t).
class KrrField final : public ScoreField {
 public:
  KrrField(KrrDenoiser k, InputMap map, double time_scale, Eigen::Index d, Schedule sched = {})
      : krr_(std::move(k)), map_(map), time_scale_(time_scale), d_(d), sched_(sched) {
    if (map_ == InputMap::radial_equivariant) throw InvalidArgument("KRR supports identity or polar features");
  }

  Eigen::Index dim() const override { return d_; }
  PredictionKind kind() const override { return PredictionKind::x_pred; }
  const Schedule& schedule() const override { return sched_; }

  Vector evaluate(const Vector& z, double t, std::optional<int> = std::nullopt) const override {
    return krr_.predict(features(map_, z, t, time_scale_));
  }

  const KrrDenoiser& denoiser() const noexcept { return krr_; }

  static Vector features(InputMap map, const Vector& z, double t, double time_scale) {
    const Vector f = map == InputMap::polar ? polar_features(z) : z;
    Vector out(f.size() + 1);
    out << f, t * time_scale;
    return out;
  }

 private:
  KrrDenoiser krr_;
  InputMap map_;
  double time_scale_;
  Eigen::Index d_;
  Schedule sched_;
};

/// Forward-process pairs (features(z_t, t), x) over the dataset with
/// stratified t in [t_min, 1 - t_min], then the fit.
inline KrrField fit_krr_field(const Dataset& ds, const KrrFieldConfig& cfg, std::uint64_t seed, Schedule sched = {}) {
  validate(ds);
  if (cfg.samples < 1) throw InvalidArgument("KRR needs at least one training pair");
  Rng rng(seed, 0x4b22);
  const Eigen::Index f = (cfg.input_map == InputMap::polar ? 3 : ds.dim()) + 1;
  RowMatrix in(cfg.samples, f), out(cfg.samples, ds.dim());
  const double lo = cfg.t_min, hi = 1.0 - cfg.t_min;
  for (int i = 0; i < cfg.samples; ++i) {
    const double t = lo + (hi - lo) * (static_cast<double>(i) + rng.uniform()) / cfg.samples;
    const auto idx = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(ds.size())));
    const Vector x = ds.points.row(idx).transpose();
    const Vector z = forward_process(sched, x, rng.normal_vector(ds.dim()), t);
    in.row(i) = KrrField::features(cfg.input_map, z, t, cfg.time_scale).transpose();
    out.row(i) = x.transpose();
  }
  return KrrField(KrrDenoiser::fit(std::move(in), std::move(out), cfg.gamma, cfg.ridge), cfg.input_map,
                  cfg.time_scale, ds.dim(), sched);
}

}  // namespace sul
