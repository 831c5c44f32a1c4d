#pragma once

// Uniform "(z, t, class?) -> prediction" interface shared by the empirical
// oracle, analytic fields, trained networks and kernel denoisers.

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>

#include "sul/dataset.hpp"
#include "sul/empirical_score.hpp"
#include "sul/numerics.hpp"
#include "sul/schedule.hpp"

namespace sul {

class ScoreField {
 public:
  virtual ~ScoreField() = default;

  virtual Eigen::Index dim() const = 0;
  virtual PredictionKind kind() const = 0;
  virtual const Schedule& schedule() const { return default_schedule_; }

  /// Raw output in kind(). `cls` = nullopt asks for the unconditional field.
  virtual Vector evaluate(const Vector& z, double t, std::optional<int> cls = std::nullopt) const = 0;

  /// Rows of `z` evaluated at matching `t`; `cls[i] < 0` means unconditional.
  /// An empty `cls` means unconditional for every row.
  virtual RowMatrix evaluate_batch(const RowMatrix& z, std::span<const double> t, std::span<const int> cls = {}) const {
    RowMatrix out(z.rows(), dim());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      std::optional<int> c;
      if (!cls.empty() && cls[static_cast<std::size_t>(i)] >= 0) c = cls[static_cast<std::size_t>(i)];
      out.row(i) = evaluate(z.row(i).transpose(), t[static_cast<std::size_t>(i)], c).transpose();
    }
    return out;
  }

  Prediction predict(const Vector& z, double t, std::optional<int> cls = std::nullopt) const {
    return {kind(), evaluate(z, t, cls)};
  }

  Vector evaluate_as(PredictionKind target, const Vector& z, double t, std::optional<int> cls = std::nullopt) const {
    return convert(schedule(), predict(z, t, cls), z, t, target).value;
  }

  Vector score(const Vector& z, double t, std::optional<int> cls = std::nullopt) const {
    return evaluate_as(PredictionKind::score, z, t, cls);
  }

  Vector velocity(const Vector& z, double t, std::optional<int> cls = std::nullopt) const {
    return evaluate_as(PredictionKind::velocity, z, t, cls);
  }

 private:
  Schedule default_schedule_{};
};

/// The empirical oracle as a field. Outputs the posterior mean (x-prediction),
/// which converts to score and velocity without cancellation at small t.
/// A class argument selects the class-restricted mixture when the dataset is
/// labeled.
class OracleField final : public ScoreField {
 public:
  explicit OracleField(const Dataset& ds, Schedule sched = {}, OracleOptions opts = {})
      : sched_(sched), uncond_(ds, sched, opts) {
    if (ds.labels) {
      for (int c = 0; c < ds.num_classes; ++c) {
        if (ds.class_indices(c).empty()) continue;
        OracleOptions co = opts;
        co.class_filter = c;
        co.knn.reset();
        per_class_.emplace(c, EmpiricalScoreOracle(ds, sched, co));
      }
    }
  }

  Eigen::Index dim() const override { return uncond_.dim(); }
  PredictionKind kind() const override { return PredictionKind::x_pred; }
  const Schedule& schedule() const override { return sched_; }

  Vector evaluate(const Vector& z, double t, std::optional<int> cls = std::nullopt) const override {
    return oracle(cls).posterior_mean(z, t);
  }

  const EmpiricalScoreOracle& oracle(std::optional<int> cls = std::nullopt) const {
    if (!cls) return uncond_;
    auto it = per_class_.find(*cls);
    if (it == per_class_.end()) throw EmptyClassError("no oracle for class " + std::to_string(*cls));
    return it->second;
  }

 private:
  Schedule sched_;
  EmpiricalScoreOracle uncond_;
  std::map<int, EmpiricalScoreOracle> per_class_;
};

/// Exact score of N(0, I) data, -z / (alpha^2 + sigma^2).
class GaussianScoreField final : public ScoreField {
 public:
  explicit GaussianScoreField(Eigen::Index d, Schedule sched = {}) : d_(d), sched_(sched) {}
  Eigen::Index dim() const override { return d_; }
  PredictionKind kind() const override { return PredictionKind::score; }
  const Schedule& schedule() const override { return sched_; }
  Vector evaluate(const Vector& z, double t, std::optional<int> = std::nullopt) const override {
    return marginal_gaussian_score(sched_, z, t);
  }

 private:
  Eigen::Index d_;
  Schedule sched_;
};

/// Adapter for closures (used by tests and analytic probes).
class FunctionField final : public ScoreField {
 public:
  using Fn = std::function<Vector(const Vector&, double, std::optional<int>)>;
  FunctionField(Eigen::Index d, PredictionKind kind, Fn fn, Schedule sched = {})
      : d_(d), kind_(kind), fn_(std::move(fn)), sched_(sched) {}
  Eigen::Index dim() const override { return d_; }
  PredictionKind kind() const override { return kind_; }
  const Schedule& schedule() const override { return sched_; }
  Vector evaluate(const Vector& z, double t, std::optional<int> cls = std::nullopt) const override {
    return fn_(z, t, cls);
  }

 private:
  Eigen::Index d_;
  PredictionKind kind_;
  Fn fn_;
  Schedule sched_;
};

}  // namespace sul
