#pragma once

// Regression losses for score networks (denoising, oracle-target and
// freedom-of-extrapolation), Adam, EMA and the training loop.
//
// Every batch draws, per example and in this order: the region index, t, the
// noise vector and the class-dropout uniform. FoE then draws its target
// indices for the whole batch. The three losses therefore see the same
// (x, t, eps) for a given seed.

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sul/dataset.hpp"
#include "sul/empirical_score.hpp"
#include "sul/errors.hpp"
#include "sul/mlp.hpp"
#include "sul/numerics.hpp"
#include "sul/schedule.hpp"

namespace sul {

enum class LossKind { dsm, oracle_dsm, foe };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::dsm: return "dsm";
    case LossKind::oracle_dsm: return "oracle-dsm";
    case LossKind::foe: return "foe";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "dsm") return LossKind::dsm;
  if (s == "oracle-dsm" || s == "oracle_dsm") return LossKind::oracle_dsm;
  if (s == "foe") return LossKind::foe;
  throw InvalidArgument("unknown loss kind '" + std::string(s) + "'");
}

struct TrainConfig {
  int iterations = 1000;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double ema_decay = 0.999;
  double class_dropout = 0.0;
  PredictionKind prediction = PredictionKind::velocity;
  LossKind loss = LossKind::dsm;
  int eval_interval = 100;
  std::uint64_t seed = 0;
  double t_min = 1e-3;
  int foe_samples = 1;

  void validate() const {
    if (iterations < 0) throw InvalidArgument("iterations must be >= 0");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw InvalidArgument("adam betas must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) throw InvalidArgument("adam_epsilon must be > 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw InvalidArgument("ema_decay must lie in [0, 1)");
    if (!(class_dropout >= 0.0 && class_dropout <= 1.0)) throw InvalidArgument("class_dropout must lie in [0, 1]");
    if (prediction == PredictionKind::score) throw InvalidArgument("training predicts velocity or x-pred");
    if (eval_interval < 1) throw InvalidArgument("eval_interval must be >= 1");
    if (!(t_min > 0.0 && t_min < 0.5)) throw InvalidArgument("t_min must lie in (0, 0.5)");
    if (foe_samples < 1) throw InvalidArgument("foe_samples must be >= 1");
  }
};

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

/// Bias-corrected Adam without weight decay.
inline void adam_step(OptimizerState& st, std::span<double> params, std::span<const double> grads,
                      const TrainConfig& cfg) {
  if (params.size() != grads.size()) throw InvalidArgument("adam_step: parameter and gradient sizes differ");
  if (st.m.empty()) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  if (st.m.size() != params.size()) throw InvalidArgument("adam_step: optimizer state size mismatch");
  ++st.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    if (!std::isfinite(g)) throw NumericFailure("adam_step: non-finite gradient", static_cast<int>(st.step));
    st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
    st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
    const double mh = st.m[i] / c1, vh = st.v[i] / c2;
    params[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_epsilon);
  }
}

inline void ema_update(std::vector<double>& ema, std::span<const double> params, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw InvalidArgument("ema decay must lie in [0, 1)");
  if (ema.size() != params.size()) throw InvalidArgument("ema_update: size mismatch");
  for (std::size_t i = 0; i < ema.size(); ++i) ema[i] = decay * ema[i] + (1.0 - decay) * params[i];
}

/// Draws training batches for one loss. x is drawn from the region subset;
/// oracle and FoE targets use the score subset. Both default to the whole
/// dataset.
class BatchSampler {
 public:
  BatchSampler(const Dataset& ds, LossKind loss, std::optional<SubsetPair> subsets = std::nullopt, Schedule sched = {})
      : ds_(&ds), loss_(loss), sched_(sched) {
    validate(ds);
    if (subsets) {
      sul::validate(*subsets, ds);
      region_ = subsets->region_idx;
      score_ = subsets->score_idx;
    } else {
      region_.resize(static_cast<std::size_t>(ds.size()));
      std::iota(region_.begin(), region_.end(), std::size_t{0});
      score_ = region_;
    }
    if (region_.empty()) throw InvalidArgument("empty region subset");
    if (score_.empty()) throw InvalidArgument("empty score subset");
    if (loss_ != LossKind::dsm) {
      score_ds_ = std::make_shared<Dataset>(subset(ds, score_));
      oracles_.emplace(-1, EmpiricalScoreOracle(*score_ds_, sched_));
      if (score_ds_->labels)
        for (int c = 0; c < score_ds_->num_classes; ++c)
          if (!score_ds_->class_indices(c).empty()) {
            OracleOptions o;
            o.class_filter = c;
            oracles_.emplace(c, EmpiricalScoreOracle(*score_ds_, sched_, o));
          }
    }
  }

  LossKind loss() const noexcept { return loss_; }
  const Schedule& schedule() const noexcept { return sched_; }
  const Dataset& dataset() const noexcept { return *ds_; }

  TrainingBatch draw(const MlpArchitecture& arch, const TrainConfig& cfg, Rng& rng) const {
    const bool conditional = arch.num_classes > 0;
    if (conditional && !ds_->labels) throw InvalidArgument("conditional network needs a labeled dataset");
    const int b = cfg.batch_size;
    const Eigen::Index d = ds_->dim();
    TrainingBatch batch;
    batch.z.resize(b, d);
    batch.target.resize(b, d);
    batch.t.resize(static_cast<std::size_t>(b));
    if (conditional) batch.cls.resize(static_cast<std::size_t>(b));

    RowMatrix x(b, d);
    const double lo = cfg.t_min, span = 1.0 - 2.0 * cfg.t_min;
    for (int i = 0; i < b; ++i) {
      const std::size_t row = region_[rng.index(region_.size())];
      const double t = lo + span * rng.uniform();
      const Vector eps = rng.normal_vector(d);
      const bool dropped = rng.uniform() < cfg.class_dropout;
      x.row(i) = ds_->points.row(static_cast<Eigen::Index>(row));
      batch.t[static_cast<std::size_t>(i)] = t;
      batch.z.row(i) = sched_.alpha(t) * x.row(i) + sched_.sigma(t) * eps.transpose();
      if (conditional) batch.cls[static_cast<std::size_t>(i)] = dropped ? -1 : (*ds_->labels)[row];
      if (loss_ == LossKind::dsm) {
        // Interpolant velocity alpha' x + sigma' eps, or the clean sample.
        batch.target.row(i) = cfg.prediction == PredictionKind::x_pred
                                  ? RowVector(x.row(i))
                                  : RowVector(sched_.alpha_dot(t) * x.row(i) + sched_.sigma_dot(t) * eps.transpose());
      }
    }

    if (loss_ == LossKind::oracle_dsm) {
      for (int i = 0; i < b; ++i) {
        const Vector z = batch.z.row(i).transpose();
        const double t = batch.t[static_cast<std::size_t>(i)];
        const Vector m = oracle_for(conditional ? batch.cls[static_cast<std::size_t>(i)] : -1).posterior_mean(z, t);
        batch.target.row(i) = convert_value(sched_, PredictionKind::x_pred, m, z, t, cfg.prediction).transpose();
      }
    } else if (loss_ == LossKind::foe) {
      for (int i = 0; i < b; ++i) {
        const Vector z = batch.z.row(i).transpose();
        const double t = batch.t[static_cast<std::size_t>(i)];
        const auto& oracle = oracle_for(conditional ? batch.cls[static_cast<std::size_t>(i)] : -1);
        const SoftmaxWeights w = oracle.softmax_weights(z, t);
        Vector y = Vector::Zero(d);
        for (int s = 0; s < cfg.foe_samples; ++s)
          y += score_ds_->points.row(static_cast<Eigen::Index>(w.indices[draw_categorical(w.weights, rng)])).transpose();
        y /= static_cast<double>(cfg.foe_samples);
        batch.target.row(i) = convert_value(sched_, PredictionKind::x_pred, y, z, t, cfg.prediction).transpose();
      }
    }
    return batch;
  }

  const EmpiricalScoreOracle& oracle_for(int cls) const {
    auto it = oracles_.find(cls);
    if (it == oracles_.end()) throw EmptyClassError("score subset has no members of class " + std::to_string(cls));
    return it->second;
  }

  static std::size_t draw_categorical(const std::vector<double>& w, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      acc += w[k];
      if (u < acc) return k;
    }
    // Rounding left u above the cumulative total: take the last positive weight.
    for (std::size_t k = w.size(); k-- > 0;)
      if (w[k] > 0.0) return k;
    return w.size() - 1;
  }

 private:
  using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

  const Dataset* ds_;
  LossKind loss_;
  Schedule sched_;
  std::vector<std::size_t> region_;
  std::vector<std::size_t> score_;
  std::shared_ptr<Dataset> score_ds_;
  std::map<int, EmpiricalScoreOracle> oracles_;
};

/// Network, optimizer state and EMA copy advanced together.
class Trainer {
 public:
  Trainer(MlpScoreNetwork net, TrainConfig cfg) : net_(std::move(net)), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (net_.kind() != cfg_.prediction) throw InvalidArgument("network prediction kind differs from training config");
    ema_.assign(net_.parameters().begin(), net_.parameters().end());
  }

  /// One Adam step on the batch; returns the loss before the step.
  double step(const TrainingBatch& batch) {
    const double loss = net_.loss_and_gradient(batch, grad_);
    if (!std::isfinite(loss)) throw NumericFailure("non-finite training loss", static_cast<int>(opt_.step));
    adam_step(opt_, net_.parameters(), grad_, cfg_);
    for (double p : net_.parameters())
      if (!std::isfinite(p)) throw NumericFailure("non-finite parameter after optimizer step", static_cast<int>(opt_.step));
    ema_update(ema_, net_.parameters(), cfg_.ema_decay);
    return loss;
  }

  double step(const BatchSampler& sampler, Rng& rng) { return step(sampler.draw(net_.architecture(), cfg_, rng)); }

  const MlpScoreNetwork& network() const noexcept { return net_; }
  MlpScoreNetwork& network() noexcept { return net_; }
  const std::vector<double>& ema() const noexcept { return ema_; }
  const OptimizerState& optimizer() const noexcept { return opt_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  MlpScoreNetwork ema_network() const { return MlpScoreNetwork(net_.architecture(), ema_, net_.schedule()); }

 private:
  MlpScoreNetwork net_;
  TrainConfig cfg_;
  OptimizerState opt_;
  std::vector<double> ema_;
  std::vector<double> grad_;
};

inline double dsm_step(Trainer& tr, const BatchSampler& sampler, Rng& rng) {
  if (sampler.loss() != LossKind::dsm) throw InvalidArgument("dsm_step needs a dsm sampler");
  return tr.step(sampler, rng);
}

inline double oracle_dsm_step(Trainer& tr, const BatchSampler& sampler, Rng& rng) {
  if (sampler.loss() != LossKind::oracle_dsm) throw InvalidArgument("oracle_dsm_step needs an oracle sampler");
  return tr.step(sampler, rng);
}

inline double foe_step(Trainer& tr, const BatchSampler& sampler, Rng& rng) {
  if (sampler.loss() != LossKind::foe) throw InvalidArgument("foe_step needs a foe sampler");
  return tr.step(sampler, rng);
}

struct EvalRecord {
  int iteration = 0;
  std::string metric;
  double value = 0.0;
};

struct TrainReport {
  std::vector<std::pair<int, double>> loss_curve;
  std::vector<EvalRecord> evals;
  Checkpoint final_checkpoint;
};

/// Called with the EMA snapshot and the raw snapshot; appends its records.
using EvalHook = std::function<void(int iteration, const MlpScoreNetwork& ema, const MlpScoreNetwork& raw,
                                    std::vector<EvalRecord>& out)>;

/// Runs cfg.iterations steps. Hooks fire at iteration 0, every eval_interval
/// iterations and after the last step.
inline TrainReport train(MlpScoreNetwork& net, const BatchSampler& sampler, const TrainConfig& cfg,
                         const EvalHook& hook = {}) {
  Trainer tr(net, cfg);
  Rng rng(cfg.seed, 0x7a11);
  TrainReport report;
  auto evaluate = [&](int it) {
    if (hook) hook(it, tr.ema_network(), tr.network(), report.evals);
  };
  evaluate(0);
  for (int it = 1; it <= cfg.iterations; ++it) {
    double loss = 0.0;
    try {
      loss = tr.step(sampler, rng);
    } catch (const NumericFailure& e) {
      throw NumericFailure(std::string(e.what()) + " at iteration " + std::to_string(it), it);
    }
    report.loss_curve.emplace_back(it, loss);
    if (it % cfg.eval_interval == 0 || it == cfg.iterations) evaluate(it);
  }
  net = tr.network();
  report.final_checkpoint = Checkpoint{net.architecture(), std::vector<double>(net.parameters().begin(), net.parameters().end()),
                                       tr.ema()};
  return report;
}

/// Paired Monte Carlo comparison of the expected gradients of two losses at
/// fixed parameters. Both samplers see the same (x, t, eps) draws per chunk;
/// standard errors come from the spread of per-chunk mean differences.
struct GradientAgreement {
  std::vector<double> mean_a;
  std::vector<double> mean_b;
  std::vector<double> diff_se;
  double diff_norm = 0.0;
  double se_norm = 0.0;
  double max_component_z = 0.0;
  int samples = 0;

  bool within(double k) const { return diff_norm <= k * se_norm; }
};

inline GradientAgreement compare_expected_gradients(const MlpScoreNetwork& net, const BatchSampler& a,
                                                    const BatchSampler& b, TrainConfig cfg, int samples, int chunk,
                                                    std::uint64_t seed) {
  if (chunk < 2 || samples < 2 * chunk) throw InvalidArgument("need at least two chunks of at least two samples");
  cfg.batch_size = chunk;
  const int chunks = samples / chunk;
  const std::size_t p = net.parameter_count();
  GradientAgreement out;
  out.mean_a.assign(p, 0.0);
  out.mean_b.assign(p, 0.0);
  std::vector<double> mean_d(p, 0.0), m2(p, 0.0), ga, gb;
  const Rng base(seed, 0x9e7d);
  for (int k = 0; k < chunks; ++k) {
    Rng ra = base.substream(static_cast<std::uint64_t>(k)), rb = ra;
    net.loss_and_gradient(a.draw(net.architecture(), cfg, ra), ga);
    net.loss_and_gradient(b.draw(net.architecture(), cfg, rb), gb);
    const double n = k + 1;
    for (std::size_t j = 0; j < p; ++j) {
      out.mean_a[j] += (ga[j] - out.mean_a[j]) / n;
      out.mean_b[j] += (gb[j] - out.mean_b[j]) / n;
      const double d = ga[j] - gb[j], delta = d - mean_d[j];
      mean_d[j] += delta / n;
      m2[j] += delta * (d - mean_d[j]);
    }
  }
  out.diff_se.resize(p);
  double dn = 0.0, sn = 0.0;
  for (std::size_t j = 0; j < p; ++j) {
    out.diff_se[j] = std::sqrt(m2[j] / (chunks - 1) / chunks);
    dn += mean_d[j] * mean_d[j];
    sn += out.diff_se[j] * out.diff_se[j];
    if (out.diff_se[j] > 0.0) out.max_component_z = std::max(out.max_component_z, std::abs(mean_d[j]) / out.diff_se[j]);
  }
  out.diff_norm = std::sqrt(dn);
  out.se_norm = std::sqrt(sn);
  out.samples = chunks * chunk;
  return out;
}

}  // namespace sul
