#pragma once

// Experiment runners behind `sul run`. Each runner takes a merged JSON config
// and returns its artifacts as an ordered name -> bytes map; writing them and
// the manifest is the caller's job.

#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sul/diagnostics.hpp"
#include "sul/geometry.hpp"
#include "sul/krr.hpp"
#include "sul/svg.hpp"
#include "sul/training.hpp"

namespace sul {

using Json = nlohmann::ordered_json;

inline constexpr std::string_view kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Config tree: defaults, merge with unknown-key rejection, typed access

inline const std::vector<std::string>& experiment_ids() {
  static const std::vector<std::string> ids{"gaussian",        "foe",           "pat",          "cfg-gap",
                                            "memorize-from-t", "rstar-profile", "overlap-curve", "scaling-line"};
  return ids;
}

namespace detail {

inline Json model_defaults(int dim, std::vector<int> hidden, std::string_view prediction) {
  return Json{{"hidden", hidden},
              {"input_map", "identity"},
              {"time_frequencies", 16},
              {"time_min_frequency", 0.5},
              {"time_max_frequency", 50.0},
              {"prediction", prediction},
              {"data_dim", dim}};
}

inline Json train_defaults(int iterations, int batch, double lr, std::string_view loss) {
  return Json{{"iterations", iterations}, {"batch_size", batch}, {"learning_rate", lr}, {"beta1", 0.9},
              {"beta2", 0.999},           {"adam_epsilon", 1e-8},  {"ema_decay", 0.999}, {"class_dropout", 0.0},
              {"loss", loss},             {"eval_interval", 100},  {"t_min", 1e-3},     {"foe_samples", 1},
              {"use_ema", true}};
}

inline Json solver_defaults() {
  return Json{{"kind", "rk45"}, {"atol", 1e-6}, {"rtol", 1e-3}, {"max_steps", 100000}, {"fixed_steps", 100},
              {"t_min", 1e-3}};
}

}  // namespace detail

/// Complete default config for one experiment id. Every accepted key appears
/// here; `print-defaults` prints this tree.
inline Json experiment_defaults(std::string_view id) {
  using detail::model_defaults, detail::solver_defaults, detail::train_defaults;
  Json j{{"experiment", id}, {"seed", 0}, {"output", ""}};
  if (id == "gaussian") {
    j["dataset"] = {{"dim", 20}, {"n", 100}, {"seed", 0}};
    j["model"] = model_defaults(20, {256, 256, 256, 256}, "x-pred");
    j["train"] = train_defaults(5000, 128, 1e-3, "dsm");
    j["train"]["eval_interval"] = 250;
    j["diagnostics"] = {{"n", 200}, {"timesteps", 20}, {"final_n", 1000}, {"final_timesteps", 100}, {"ambient_points", 4096}};
  } else if (id == "foe") {
    j["dataset"] = {{"n", 2048}, {"components", 8}, {"radius", 2.0}, {"spread", 0.25}, {"seed", 0}};
    j["model"] = model_defaults(2, {128, 128, 128}, "x-pred");
    j["train"] = train_defaults(4000, 128, 2e-3, "foe");
    j["foe"] = {{"score_size", 32},
                {"region_sizes", {32, 64, 128, 256}},
                {"samples", 500},
                {"calibration_n", 8},
                {"thresholds", {0.25, 1.0 / 3.0, 0.5}}};
    j["solver"] = solver_defaults();
  } else if (id == "pat") {
    j["variants"] = {"baseline", "polar", "krr", "equivariant", "krr-cartesian"};
    j["model"] = model_defaults(2, {128, 128, 128}, "x-pred");
    j["train"] = train_defaults(4000, 128, 2e-3, "dsm");
    j["krr"] = {{"gamma", 1.0}, {"ridge", 1e-4}, {"time_scale", 1.0}, {"samples", 1024}};
    j["rule"] = {{"bridge_x", 0.15}, {"bridge_y", 0.1}, {"ring_inner", 0.05}, {"ring_outer", 1.15}};
    j["samples"] = 1000;
    j["solver"] = solver_defaults();
  } else if (id == "cfg-gap") {
    j["dataset"] = {{"dim", 32}, {"per_class", 32}, {"offset", 3.0}, {"spread", 2.0}, {"seed", 0}};
    j["model"] = model_defaults(32, {256, 256, 256}, "velocity");
    j["train"] = train_defaults(3000, 128, 1e-3, "dsm");
    j["train"]["class_dropout"] = 0.2;
    j["gap"] = {{"t_grid", {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}}, {"n", 200}};
    j["solver"] = solver_defaults();
  } else if (id == "memorize-from-t") {
    j["dataset"] = {{"dim", 8}, {"n", 16}, {"seed", 0}};
    j["model"] = model_defaults(8, {256, 256, 256}, "velocity");
    j["train"] = train_defaults(4000, 128, 1e-3, "dsm");
    j["denoise"] = {{"t_from", {0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}}, {"n", 400}};
    j["solver"] = solver_defaults();
  } else if (id == "rstar-profile") {
    j["dataset"] = {{"dim", 32}, {"n", 64}, {"seed", 0}};
    j["model"] = model_defaults(32, {256, 256, 256}, "velocity");
    j["train"] = train_defaults(2000, 128, 1e-3, "dsm");
    j["field"] = "model";
    j["profile"] = {{"n", 100}, {"grid", 50}};
    j["solver"] = solver_defaults();
  } else if (id == "overlap-curve") {
    j["dataset"] = {{"dim", 32}, {"per_class", 32}, {"offset", 3.0}, {"spread", 2.0}, {"seed", 0}};
    j["curve"] = {{"grid", 99}, {"class", -1}};
  } else if (id == "scaling-line") {
    j["dataset"] = {{"dim", 2}, {"n", 2048}, {"components", 8}, {"radius", 2.0}, {"spread", 0.25}, {"seed", 0},
                    {"train_size", 64}};
    j["model"] = model_defaults(2, {64, 64}, "velocity");
    j["train"] = train_defaults(2000, 128, 1e-3, "dsm");
    j["sweep"] = {{"iterations", {100, 200, 400, 800, 1600, 3200, 6400}}, {"samples", 500}, {"projections", 64},
                  {"loss_n", 200}, {"loss_timesteps", 50}};
    j["solver"] = solver_defaults();
  } else if (id == "train") {
    j["dataset"] = {{"path", ""}, {"format", "csv"}};
    j["model"] = model_defaults(0, {128, 128, 128}, "x-pred");
    j["train"] = train_defaults(2000, 128, 1e-3, "dsm");
    j["conditional"] = false;
  } else {
    throw ConfigError("experiment", "unknown experiment id '" + std::string(id) + "'");
  }
  return j;
}

namespace detail {

inline std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

inline bool same_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

inline void merge_into(Json& base, const Json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string p = join_path(path, it.key());
    if (!base.contains(it.key())) throw ConfigError(p, "unknown key");
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_into(slot, it.value(), p);
    } else if (!same_kind(slot, it.value())) {
      throw ConfigError(p, std::string("expected ") + slot.type_name() + ", got " + it.value().type_name());
    } else {
      slot = it.value();
    }
  }
}

}  // namespace detail

/// Overlays `user` on the defaults of its experiment id. Unknown keys and
/// type mismatches raise ConfigError carrying the dotted path.
inline Json merge_config(const Json& user) {
  if (!user.is_object()) throw ConfigError("<root>", "config must be an object");
  if (!user.contains("experiment") || !user["experiment"].is_string())
    throw ConfigError("experiment", "missing experiment id");
  if (!user.contains("seed")) throw ConfigError("seed", "seed is mandatory");
  Json merged = experiment_defaults(user["experiment"].get<std::string>());
  detail::merge_into(merged, user, "");
  return merged;
}

inline Json parse_config_text(const std::string& text) {
  Json user;
  try {
    user = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError("<root>", std::string("parse error: ") + e.what());
  }
  return merge_config(user);
}

inline Json load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

namespace detail {

inline const Json& at(const Json& j, const std::string& path) {
  const Json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!cur->is_object() || !cur->contains(key)) throw ConfigError(path, "missing key");
    cur = &(*cur)[key];
    if (dot == std::string::npos) return *cur;
    start = dot + 1;
  }
}

template <class T>
T get(const Json& j, const std::string& path) {
  try {
    return at(j, path).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(path, e.what());
  }
}

inline int get_positive(const Json& j, const std::string& path) {
  const int v = get<int>(j, path);
  if (v < 1) throw ConfigError(path, "must be >= 1");
  return v;
}

template <class F>
auto wrap(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const InvalidArgument& e) {
    throw ConfigError(path, e.what());
  }
}

}  // namespace detail

inline MlpArchitecture parse_architecture(const Json& j, const std::string& path = "model") {
  using detail::get;
  MlpArchitecture a;
  a.data_dim = get<int>(j, path + ".data_dim");
  a.hidden = get<std::vector<int>>(j, path + ".hidden");
  a.input_map = detail::wrap(path + ".input_map", [&] { return parse_input_map(get<std::string>(j, path + ".input_map")); });
  a.time_frequencies = get<int>(j, path + ".time_frequencies");
  a.time_min_frequency = get<double>(j, path + ".time_min_frequency");
  a.time_max_frequency = get<double>(j, path + ".time_max_frequency");
  a.prediction = detail::wrap(path + ".prediction",
                              [&] { return parse_prediction_kind(get<std::string>(j, path + ".prediction")); });
  detail::wrap(path, [&] { a.validate(); });
  return a;
}

inline TrainConfig parse_train(const Json& j, PredictionKind prediction, std::uint64_t seed,
                               const std::string& path = "train") {
  using detail::get;
  TrainConfig c;
  c.iterations = get<int>(j, path + ".iterations");
  c.batch_size = get<int>(j, path + ".batch_size");
  c.learning_rate = get<double>(j, path + ".learning_rate");
  c.beta1 = get<double>(j, path + ".beta1");
  c.beta2 = get<double>(j, path + ".beta2");
  c.adam_epsilon = get<double>(j, path + ".adam_epsilon");
  c.ema_decay = get<double>(j, path + ".ema_decay");
  c.class_dropout = get<double>(j, path + ".class_dropout");
  c.loss = detail::wrap(path + ".loss", [&] { return parse_loss_kind(get<std::string>(j, path + ".loss")); });
  c.eval_interval = get<int>(j, path + ".eval_interval");
  c.t_min = get<double>(j, path + ".t_min");
  c.foe_samples = get<int>(j, path + ".foe_samples");
  c.prediction = prediction;
  c.seed = seed;
  detail::wrap(path, [&] { c.validate(); });
  return c;
}

inline SolverConfig parse_solver(const Json& j, const std::string& path = "solver") {
  using detail::get;
  SolverConfig s;
  s.kind = detail::wrap(path + ".kind", [&] { return parse_solver_kind(get<std::string>(j, path + ".kind")); });
  s.atol = get<double>(j, path + ".atol");
  s.rtol = get<double>(j, path + ".rtol");
  s.max_steps = get<int>(j, path + ".max_steps");
  s.fixed_steps = get<int>(j, path + ".fixed_steps");
  s.t_min = get<double>(j, path + ".t_min");
  s.t_start = 1.0 - s.t_min;
  s.t_end = s.t_min;
  detail::wrap(path, [&] { s.validate(); });
  return s;
}

// ---------------------------------------------------------------------------
// Run plumbing

struct RunOptions {
  bool svg = false;
  std::ostream* log = nullptr;  // progress lines; null for silence
};

/// Artifacts in emission order.
struct RunOutput {
  std::vector<std::pair<std::string, std::string>> files;

  void add(std::string name, std::string content) { files.emplace_back(std::move(name), std::move(content)); }
  const std::string& file(const std::string& name) const {
    for (const auto& [n, c] : files)
      if (n == name) return c;
    throw InvalidArgument("no artifact named " + name);
  }
  bool has(const std::string& name) const {
    for (const auto& f : files)
      if (f.first == name) return true;
    return false;
  }
};

namespace detail {

inline void log(const RunOptions& o, const std::string& line) {
  if (o.log) *o.log << line << '\n' << std::flush;
}

inline std::string loss_csv(const std::vector<std::pair<int, double>>& curve) {
  CsvWriter w({"iteration", "loss"});
  for (const auto& [it, v] : curve) w.cell(it).cell(v).end_row();
  return w.str();
}

inline std::string evals_csv(const std::vector<EvalRecord>& evals) {
  CsvWriter w({"iteration", "metric", "value"});
  for (const auto& e : evals) w.cell(e.iteration).cell(e.metric).cell(e.value).end_row();
  return w.str();
}

inline std::string points_csv(const RowMatrix& pts) {
  std::vector<std::string> header;
  for (Eigen::Index j = 0; j < pts.cols(); ++j) header.push_back("z" + std::to_string(j));
  CsvWriter w(header);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    for (Eigen::Index j = 0; j < pts.cols(); ++j) w.cell(pts(i, j));
    w.end_row();
  }
  return w.str();
}

inline std::string checkpoint_bytes(const Checkpoint& ck) {
  std::ostringstream out(std::ios::binary);
  save_checkpoint(ck, out);
  return out.str();
}

inline MlpScoreNetwork snapshot(const TrainReport& rep, bool use_ema) {
  const Checkpoint& ck = rep.final_checkpoint;
  return MlpScoreNetwork(ck.arch, use_ema && ck.ema ? *ck.ema : ck.params);
}

/// Progress logging hook wrapper; adds a "train_loss" record when a logger is set.
inline EvalHook progress_hook(const RunOptions& o, const std::string& tag, EvalHook inner = {}) {
  return [&o, tag, inner](int it, const MlpScoreNetwork& ema, const MlpScoreNetwork& raw, std::vector<EvalRecord>& out) {
    if (inner) inner(it, ema, raw, out);
    if (o.log) {
      std::ostringstream line;
      line << tag << " iteration " << it;
      for (auto r = out.rbegin(); r != out.rend() && r->iteration == it; ++r) line << ' ' << r->metric << '=' << r->value;
      log(o, line.str());
    }
  };
}

inline TrainReport train_model(const Dataset& ds, const Json& cfg, LossKind loss, std::optional<SubsetPair> subsets,
                               std::uint64_t seed, const RunOptions& o, const std::string& tag, EvalHook hook = {},
                               std::optional<int> classes = std::nullopt) {
  MlpArchitecture arch = parse_architecture(cfg);
  if (arch.data_dim != ds.dim()) throw ConfigError("model.data_dim", "does not match the dataset dimension");
  if (classes) arch.num_classes = *classes;
  TrainConfig tc = parse_train(cfg, arch.prediction, seed);
  tc.loss = loss;
  const BatchSampler sampler(ds, loss, std::move(subsets));
  MlpScoreNetwork net(arch, seed);
  return train(net, sampler, tc, progress_hook(o, tag, std::move(hook)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gaussian: selective underfitting on N(0, I) data

/// Trains on |D| draws of N(0, I) and tracks three lambda-weighted score
/// errors: to the empirical score and to the true score in the supervision
/// region, and to the true score on forward draws of fresh N(0, I) data.
inline RunOutput run_gaussian(const Json& cfg, const RunOptions& o) {
  using detail::get;
  const std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
  const Dataset ds = make_gaussian_dataset(get<int>(cfg, "dataset.dim"), get<int>(cfg, "dataset.n"),
                                           get<std::uint64_t>(cfg, "dataset.seed"));
  const Dataset ambient =
      make_gaussian_dataset(ds.dim(), detail::get_positive(cfg, "diagnostics.ambient_points"), get<std::uint64_t>(cfg, "dataset.seed") + 1);
  const OracleField oracle(ds);
  const GaussianScoreField truth(ds.dim());
  const bool use_ema = get<bool>(cfg, "train.use_ema");

  EstimatorConfig ec;
  ec.n = detail::get_positive(cfg, "diagnostics.n");
  ec.timesteps = detail::get_positive(cfg, "diagnostics.timesteps");
  ec.seed = seed;
  ec.weighting = Weighting::lambda;
  const RegionInputs sup = region_inputs(Region::supervision, ds, nullptr, ec);
  const RegionInputs amb = region_inputs(Region::supervision, ambient, nullptr, ec);

  auto errors = [&](const ScoreField& f, const EstimatorConfig& c, const RegionInputs& s, const RegionInputs& a) {
    auto q = [&f](const ScoreField& ref) {
      return BatchQuantity([&f, &ref](const RowMatrix& z, double t) { return score_sq_diff(f, ref, z, t); });
    };
    return std::array<RegionEstimate, 3>{estimate_on(s, Region::supervision, q(oracle), c),
                                         estimate_on(s, Region::supervision, q(truth), c),
                                         estimate_on(a, Region::supervision, q(truth), c)};
  };
  static const char* names[3] = {"sup_vs_empirical", "sup_vs_truth", "ambient_vs_truth"};
  EstimatorConfig fc = ec;
  fc.n = detail::get_positive(cfg, "diagnostics.final_n");
  fc.timesteps = detail::get_positive(cfg, "diagnostics.final_timesteps");
  const RegionInputs fsup = region_inputs(Region::supervision, ds, nullptr, fc);
  const RegionInputs famb = region_inputs(Region::supervision, ambient, nullptr, fc);

  // Initial errors on the final-estimate inputs give a like-for-like baseline.
  std::vector<MetricRow> rows;
  EvalHook hook = [&](int it, const MlpScoreNetwork& ema, const MlpScoreNetwork& raw, std::vector<EvalRecord>& out) {
    const MlpScoreNetwork& net = use_ema ? ema : raw;
    if (it == 0) {
      const auto init = errors(net, fc, fsup, famb);
      for (int k = 0; k < 3; ++k)
        append_estimate(rows, std::string(names[k]) + "_init", init[static_cast<std::size_t>(k)], seed);
    }
    const auto e = errors(net, ec, sup, amb);
    for (int k = 0; k < 3; ++k) out.push_back({it, names[k], e[static_cast<std::size_t>(k)].value});
  };
  const TrainReport rep = detail::train_model(ds, cfg, LossKind::dsm, std::nullopt, seed, o, "gaussian", hook);

  const auto fin = errors(detail::snapshot(rep, use_ema), fc, fsup, famb);
  for (int k = 0; k < 3; ++k) append_estimate(rows, names[k], fin[static_cast<std::size_t>(k)], seed);

  RunOutput out;
  out.add("loss.csv", detail::loss_csv(rep.loss_curve));
  out.add("evals.csv", detail::evals_csv(rep.evals));
  out.add("metrics.csv", metrics_csv(rows));
  out.add("checkpoint.bin", detail::checkpoint_bytes(rep.final_checkpoint));
  if (o.svg) {
    SvgPlot p("score error during training", "iteration", "lambda-weighted squared error");
    p.log_y = true;
    for (const char* n : names) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& e : rep.evals)
        if (e.metric == n) pts.emplace_back(e.iteration, e.value);
      p.add_series(n, pts);
    }
    out.add("evals.svg", p.render());
  }
  return out;
}


namespace detail {

inline std::vector<std::pair<double, double>> series(const std::vector<EvalRecord>& evals, const std::string& metric) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& e : evals)
    if (e.metric == metric) pts.emplace_back(e.iteration, e.value);
  return pts;
}

inline std::string loss_svg(const std::vector<std::pair<int, double>>& curve, const std::string& title) {
  SvgPlot p(title, "iteration", "training loss");
  p.log_y = true;
  std::vector<std::pair<double, double>> pts;
  for (const auto& [it, v] : curve) pts.emplace_back(it, v);
  p.add_series("loss", pts);
  return p.render();
}

inline std::vector<double> linspace_open(int count) {
  std::vector<double> ts;
  for (int k = 1; k <= count; ++k) ts.push_back(static_cast<double>(k) / (count + 1));
  return ts;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// foe: freedom of extrapolation

/// Fixed score subset, growing region subset. Each region size trains an
/// x-pred network with the FoE loss and reports how many samples land on
/// score points.
inline RunOutput run_foe(const Json& cfg, const RunOptions& o) {
  using detail::get;
  const std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
  RingMixtureSpec spec;
  spec.n = detail::get_positive(cfg, "dataset.n");
  spec.components = detail::get_positive(cfg, "dataset.components");
  spec.radius = get<double>(cfg, "dataset.radius");
  spec.spread = get<double>(cfg, "dataset.spread");
  spec.seed = get<std::uint64_t>(cfg, "dataset.seed");
  Dataset ds = detail::wrap("dataset", [&] { return make_ring_mixture_dataset(spec); });
  ds.labels.reset();
  ds.num_classes = 0;

  const int n_score = detail::get_positive(cfg, "foe.score_size");
  const auto sizes = get<std::vector<int>>(cfg, "foe.region_sizes");
  const auto thresholds = get<std::vector<double>>(cfg, "foe.thresholds");
  const int n_samples = detail::get_positive(cfg, "foe.samples");
  const int cal_n = detail::get_positive(cfg, "foe.calibration_n");
  if (cal_n > n_score) throw ConfigError("foe.calibration_n", "must not exceed foe.score_size");
  for (int r : sizes)
    if (r < n_score || r > ds.size()) throw ConfigError("foe.region_sizes", "sizes must lie in [score_size, dataset.n]");
  for (double th : thresholds)
    if (!(th > 0.0 && th < 1.0)) throw ConfigError("foe.thresholds", "thresholds must lie in (0, 1)");
  const SolverConfig solver = parse_solver(cfg);
  const bool use_ema = get<bool>(cfg, "train.use_ema");

  RunOutput out;
  CsvWriter mem({"region_size", "score_size", "threshold", "memorization_ratio", "mean_calibrated_l2", "samples"});
  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> curves;
  for (double th : thresholds) curves.push_back({"threshold " + format_double(th), {}});
  std::string losses;
  CsvWriter loss_w({"region_size", "iteration", "loss"});
  for (int r : sizes) {
    const SubsetPair pair = split_score_region(ds, static_cast<std::size_t>(n_score), static_cast<std::size_t>(r), seed);
    const RowMatrix score_pts = subset(ds, pair.score_idx).points;
    const TrainReport rep = detail::train_model(ds, cfg, LossKind::foe, pair, seed, o, "foe region " + std::to_string(r));
    for (const auto& [it, v] : rep.loss_curve) loss_w.cell(r).cell(it).cell(v).end_row();
    const MlpScoreNetwork net = detail::snapshot(rep, use_ema);
    const SampleResult res = sample(net, n_samples, solver, seed);
    const std::vector<double> cal = calibrated_l2_all(res.samples, score_pts, cal_n);
    const double mean_cal = compensated_mean(cal);
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
      const double ratio = memorization_ratio(res.samples, score_pts, cal_n, thresholds[k]);
      mem.cell(r).cell(n_score).cell(thresholds[k]).cell(ratio).cell(mean_cal).cell(n_samples).end_row();
      curves[k].second.emplace_back(r, ratio);
    }
    out.add("samples_region_" + std::to_string(r) + ".csv", detail::points_csv(res.samples));
  }
  out.add("memorization.csv", mem.str());
  out.add("loss.csv", loss_w.str());
  if (o.svg) {
    SvgPlot p("memorization vs region size", "region size", "memorization ratio");
    p.markers = true;
    for (auto& [name, pts] : curves) p.add_series(name, pts);
    out.add("memorization.svg", p.render());
  }
  return out;
}

// ---------------------------------------------------------------------------
// pat: perception-aligned training toy

inline RunOutput run_pat(const Json& cfg, const RunOptions& o) {
  using detail::get;
  const std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
  const Dataset ds = make_pat_toy_dataset();
  const auto variants = get<std::vector<std::string>>(cfg, "variants");
  if (variants.empty()) throw ConfigError("variants", "at least one variant is required");
  const int n = detail::get_positive(cfg, "samples");
  const SolverConfig solver = parse_solver(cfg);
  const bool use_ema = get<bool>(cfg, "train.use_ema");
  PatRule rule;
  rule.bridge_x = get<double>(cfg, "rule.bridge_x");
  rule.bridge_y = get<double>(cfg, "rule.bridge_y");
  rule.ring_inner = get<double>(cfg, "rule.ring_inner");
  rule.ring_outer = get<double>(cfg, "rule.ring_outer");

  RunOutput out;
  CsvWriter q({"variant", "bad_fraction", "good_fraction", "other_fraction", "samples"});
  std::string loss_all;
  CsvWriter loss_w({"variant", "iteration", "loss"});
  for (const std::string& v : variants) {
    RowMatrix samples;
    if (v == "krr" || v == "krr-cartesian") {
      KrrFieldConfig kc;
      kc.input_map = v == "krr" ? InputMap::polar : InputMap::identity;
      kc.gamma = get<double>(cfg, "krr.gamma");
      kc.ridge = get<double>(cfg, "krr.ridge");
      kc.time_scale = get<double>(cfg, "krr.time_scale");
      kc.samples = detail::get_positive(cfg, "krr.samples");
      const KrrField field = detail::wrap("krr", [&] { return fit_krr_field(ds, kc, seed); });
      detail::log(o, "pat " + v + " residual " + format_double(field.denoiser().residual()));
      samples = sample(field, n, solver, seed).samples;
    } else {
      Json c = cfg;
      if (v == "baseline")
        c["model"]["input_map"] = "identity";
      else if (v == "polar")
        c["model"]["input_map"] = "polar";
      else if (v == "equivariant")
        c["model"]["input_map"] = "radial-equivariant";
      else
        throw ConfigError("variants", "unknown variant '" + v + "' (baseline, polar, krr, krr-cartesian, equivariant)");
      const TrainReport rep = detail::train_model(ds, c, LossKind::dsm, std::nullopt, seed, o, "pat " + v);
      for (const auto& [it, l] : rep.loss_curve) loss_w.cell(v).cell(it).cell(l).end_row();
      samples = sample(detail::snapshot(rep, use_ema), n, solver, seed).samples;
    }
    const PatQuality pq = pat_quality(samples, rule);
    q.cell(v).cell(pq.bad).cell(pq.good).cell(pq.other).cell(n).end_row();
    detail::log(o, "pat " + v + " bad=" + format_double(pq.bad) + " good=" + format_double(pq.good));
    out.add("samples_" + v + ".csv", detail::points_csv(samples));
  }
  out.add("quality.csv", q.str());
  out.add("loss.csv", loss_w.str());
  return out;
}

// ---------------------------------------------------------------------------
// cfg-gap: conditional vs unconditional score gap by region

inline RunOutput run_cfg_gap(const Json& cfg, const RunOptions& o) {
  using detail::get;
  const std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
  TwoClassSpec spec;
  spec.dim = detail::get_positive(cfg, "dataset.dim");
  spec.per_class = detail::get_positive(cfg, "dataset.per_class");
  spec.offset = get<double>(cfg, "dataset.offset");
  spec.spread = get<double>(cfg, "dataset.spread");
  spec.seed = get<std::uint64_t>(cfg, "dataset.seed");
  const Dataset ds = make_two_class_dataset(spec);
  const bool use_ema = get<bool>(cfg, "train.use_ema");

  CfgGapConfig gc;
  gc.t_grid = get<std::vector<double>>(cfg, "gap.t_grid");
  gc.n = detail::get_positive(cfg, "gap.n");
  gc.seed = seed;
  gc.solver = parse_solver(cfg);
  for (double t : gc.t_grid)
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("gap.t_grid", "grid must lie in (0, 1)");

  const TrainReport rep =
      detail::train_model(ds, cfg, LossKind::dsm, std::nullopt, seed, o, "cfg-gap", {}, ds.num_classes);
  const MlpScoreNetwork net = detail::snapshot(rep, use_ema);
  const OracleField oracle(ds);

  struct Curve {
    const char* source;
    Region region;
    std::vector<GapSummary> rows;
  };
  std::vector<Curve> curves{{"oracle", Region::supervision, cfg_gap_curve(oracle, oracle, Region::supervision, ds, gc)},
                            {"model", Region::supervision, cfg_gap_curve(net, net, Region::supervision, ds, gc)},
                            {"model", Region::extrapolation, cfg_gap_curve(net, net, Region::extrapolation, ds, gc)}};
  CsvWriter w({"source", "region", "t", "median", "p10", "p90", "mean_score_norm", "n"});
  for (const auto& c : curves)
    for (const auto& g : c.rows)
      w.cell(c.source).cell(to_string(c.region)).cell(g.t).cell(g.median).cell(g.p10).cell(g.p90).cell(g.mean_score_norm)
          .cell(gc.n * ds.num_classes).end_row();

  RunOutput out;
  out.add("gap.csv", w.str());
  out.add("loss.csv", detail::loss_csv(rep.loss_curve));
  out.add("checkpoint.bin", detail::checkpoint_bytes(rep.final_checkpoint));
  if (o.svg) {
    SvgPlot p("CFG gap", "t", "median |s(z|c) - s(z)|");
    for (const auto& c : curves) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& g : c.rows) pts.emplace_back(g.t, g.median);
      p.add_series(std::string(c.source) + " " + std::string(to_string(c.region)), pts);
    }
    out.add("gap.svg", p.render());
  }
  return out;
}

// ---------------------------------------------------------------------------
// memorize-from-t: partial denoising from forward draws

inline RunOutput run_memorize_from_t(const Json& cfg, const RunOptions& o) {
  using detail::get;
  const std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
  const Dataset ds = make_gaussian_dataset(detail::get_positive(cfg, "dataset.dim"), detail::get_positive(cfg, "dataset.n"),
                                           get<std::uint64_t>(cfg, "dataset.seed"));
  const auto t_from = get<std::vector<double>>(cfg, "denoise.t_from");
  const int n = detail::get_positive(cfg, "denoise.n");
  const SolverConfig solver = parse_solver(cfg);
  for (double t : t_from)
    if (!(t >= solver.t_min && t <= 1.0)) throw ConfigError("denoise.t_from", "values must lie in [solver.t_min, 1]");
  const bool use_ema = get<bool>(cfg, "train.use_ema");

  const TrainReport rep = detail::train_model(ds, cfg, LossKind::dsm, std::nullopt, seed, o, "memorize-from-t");
  const MlpScoreNetwork net = detail::snapshot(rep, use_ema);

  CsvWriter w({"t_from", "regress_to_origin", "overlap", "n"});
  std::vector<std::pair<double, double>> ratio_pts, overlap_pts;
  const double min_sq = min_pairwise_sq_distance(ds);
  for (std::size_t k = 0; k < t_from.size(); ++k) {
    const double t = t_from[k];
    Rng rng(seed, 0x3e70 + k);
    std::vector<std::size_t> origins(static_cast<std::size_t>(n));
    RowMatrix zt(n, ds.dim());
    for (int i = 0; i < n; ++i) {
      origins[static_cast<std::size_t>(i)] = rng.index(static_cast<std::size_t>(ds.size()));
      const Vector x = ds.point(static_cast<Eigen::Index>(origins[static_cast<std::size_t>(i)]));
      zt.row(i) = forward_process(net.schedule(), x, rng.normal_vector(ds.dim()), t).transpose();
    }
    RowMatrix outz(n, ds.dim());
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
      const auto r = static_cast<Eigen::Index>(i);
      outz.row(r) = denoise_from(net, zt.row(r).transpose(), t, solver).transpose();
    });
    const double ratio = regress_to_origin_ratio(origins, outz, ds);
    const double ov = t < 1.0 ? overlap_from_min_distance(min_sq, t) : 1.0;
    w.cell(t).cell(ratio).cell(ov).cell(n).end_row();
    ratio_pts.emplace_back(t, ratio);
    overlap_pts.emplace_back(t, ov);
    detail::log(o, "memorize-from-t t=" + format_double(t) + " ratio=" + format_double(ratio));
  }

  RunOutput out;
  out.add("regress_to_origin.csv", w.str());
  out.add("loss.csv", detail::loss_csv(rep.loss_curve));
  out.add("checkpoint.bin", detail::checkpoint_bytes(rep.final_checkpoint));
  if (o.svg) {
    SvgPlot p("memorization from timestep", "t_from", "fraction");
    p.markers = true;
    p.add_series("regress-to-origin", ratio_pts);
    p.add_series("overlap C(t)", overlap_pts);
    out.add("regress_to_origin.svg", p.render());
  }
  return out;
}

// ---------------------------------------------------------------------------
// rstar-profile: r* along sampling trajectories

inline RunOutput run_rstar_profile(const Json& cfg, const RunOptions& o) {
  using detail::get;
  const std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
  const Dataset ds = make_gaussian_dataset(detail::get_positive(cfg, "dataset.dim"), detail::get_positive(cfg, "dataset.n"),
                                           get<std::uint64_t>(cfg, "dataset.seed"));
  const std::string which = get<std::string>(cfg, "field");
  const int n = detail::get_positive(cfg, "profile.n");
  const int grid_n = detail::get_positive(cfg, "profile.grid");
  const SolverConfig solver = parse_solver(cfg);

  RunOutput out;
  std::unique_ptr<ScoreField> field;
  if (which == "oracle") {
    field = std::make_unique<OracleField>(ds);
  } else if (which == "model") {
    const TrainReport rep = detail::train_model(ds, cfg, LossKind::dsm, std::nullopt, seed, o, "rstar-profile");
    field = std::make_unique<MlpScoreNetwork>(detail::snapshot(rep, get<bool>(cfg, "train.use_ema")));
    out.add("loss.csv", detail::loss_csv(rep.loss_curve));
    out.add("checkpoint.bin", detail::checkpoint_bytes(rep.final_checkpoint));
  } else {
    throw ConfigError("field", "expected 'model' or 'oracle'");
  }
  const SampleResult res = sample(*field, n, solver, seed, true);
  std::vector<double> grid;
  for (int k = 0; k < grid_n; ++k)
    grid.push_back(solver.t_min + (1.0 - 2.0 * solver.t_min) * (grid_n == 1 ? 0.5 : static_cast<double>(k) / (grid_n - 1)));
  const auto rows = rstar_profile(ds, res.trajectories, grid);

  CsvWriter w({"t", "sample", "r_star"});
  for (const auto& r : rows) w.cell(r.t).cell(r.sample).cell(r.r_star).end_row();
  CsvWriter s({"t", "median", "p10", "p90", "mean"});
  std::vector<std::pair<double, double>> med, p10, p90;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    std::vector<double> v;
    for (int i = 0; i < n; ++i) v.push_back(rows[k * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)].r_star);
    const double m = quantile(v, 0.5), lo = quantile(v, 0.1), hi = quantile(v, 0.9);
    s.cell(grid[k]).cell(m).cell(lo).cell(hi).cell(compensated_mean(v)).end_row();
    med.emplace_back(grid[k], m);
    p10.emplace_back(grid[k], lo);
    p90.emplace_back(grid[k], hi);
  }
  out.add("rstar.csv", w.str());
  out.add("rstar_summary.csv", s.str());
  if (o.svg) {
    SvgPlot p("r* along sampling trajectories", "t", "r*");
    p.add_series("median", med);
    p.add_series("p10", p10);
    p.add_series("p90", p90);
    out.add("rstar.svg", p.render());
  }
  return out;
}

// ---------------------------------------------------------------------------
// overlap-curve: worst-case Bhattacharyya coefficient over t

inline RunOutput run_overlap_curve(const Json& cfg, const RunOptions& o) {
  using detail::get;
  TwoClassSpec spec;
  spec.dim = detail::get_positive(cfg, "dataset.dim");
  spec.per_class = detail::get_positive(cfg, "dataset.per_class");
  spec.offset = get<double>(cfg, "dataset.offset");
  spec.spread = get<double>(cfg, "dataset.spread");
  spec.seed = get<std::uint64_t>(cfg, "dataset.seed");
  const Dataset ds = make_two_class_dataset(spec);
  const int cls = get<int>(cfg, "curve.class");
  if (cls >= ds.num_classes) throw ConfigError("curve.class", "class out of range");
  const auto ts = detail::linspace_open(detail::get_positive(cfg, "curve.grid"));
  const auto curve = overlap_curve(ds, ts, cls < 0 ? std::nullopt : std::optional<int>(cls));
  CsvWriter w({"t", "overlap"});
  for (const auto& [t, c] : curve) w.cell(t).cell(c).end_row();
  RunOutput out;
  out.add("overlap.csv", w.str());
  if (o.svg) {
    SvgPlot p("Bhattacharyya overlap", "t", "C(t)");
    p.add_series("C(t)", curve);
    out.add("overlap.svg", p.render());
  }
  return out;
}

// ---------------------------------------------------------------------------
// scaling-line: supervision loss vs sample quality over training time

inline RunOutput run_scaling_line(const Json& cfg, const RunOptions& o) {
  using detail::get;
  const std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
  RingMixtureSpec spec;
  spec.n = detail::get_positive(cfg, "dataset.n");
  spec.components = detail::get_positive(cfg, "dataset.components");
  spec.radius = get<double>(cfg, "dataset.radius");
  spec.spread = get<double>(cfg, "dataset.spread");
  spec.seed = get<std::uint64_t>(cfg, "dataset.seed");
  if (get<int>(cfg, "dataset.dim") != 2) throw ConfigError("dataset.dim", "ring mixture is 2-D");
  Dataset all = detail::wrap("dataset", [&] { return make_ring_mixture_dataset(spec); });
  all.labels.reset();
  all.num_classes = 0;
  const int n_train = detail::get_positive(cfg, "dataset.train_size");
  if (n_train >= all.size()) throw ConfigError("dataset.train_size", "must be smaller than dataset.n");
  std::vector<std::size_t> tr(static_cast<std::size_t>(n_train)), held;
  for (int i = 0; i < n_train; ++i) tr[static_cast<std::size_t>(i)] = static_cast<std::size_t>(i);
  for (auto i = static_cast<std::size_t>(n_train); i < static_cast<std::size_t>(all.size()); ++i) held.push_back(i);
  const Dataset train_ds = subset(all, tr);
  const RowMatrix held_pts = subset(all, held).points;

  auto checkpoints = get<std::vector<int>>(cfg, "sweep.iterations");
  if (checkpoints.size() < 2) throw ConfigError("sweep.iterations", "need at least two checkpoints");
  for (int it : checkpoints)
    if (it < 1) throw ConfigError("sweep.iterations", "checkpoints must be >= 1");
  std::sort(checkpoints.begin(), checkpoints.end());
  const int n_samples = detail::get_positive(cfg, "sweep.samples");
  const int projections = detail::get_positive(cfg, "sweep.projections");
  const int loss_n = detail::get_positive(cfg, "sweep.loss_n");
  const int loss_t = detail::get_positive(cfg, "sweep.loss_timesteps");
  const SolverConfig solver = parse_solver(cfg);
  const bool use_ema = get<bool>(cfg, "train.use_ema");

  Json c = cfg;
  c["train"]["iterations"] = checkpoints.back();
  int g = checkpoints.front();
  for (int it : checkpoints) g = std::gcd(g, it);
  c["train"]["eval_interval"] = g;
  std::vector<QualityPoint> pts;
  EvalHook hook = [&](int it, const MlpScoreNetwork& ema, const MlpScoreNetwork& raw, std::vector<EvalRecord>& out) {
    if (!std::binary_search(checkpoints.begin(), checkpoints.end(), it)) return;
    const MlpScoreNetwork& net = use_ema ? ema : raw;
    QualityPoint q;
    q.supervision_loss = supervision_loss(net, train_ds, loss_n, loss_t, seed);
    q.quality = sliced_wasserstein(sample(net, n_samples, solver, seed).samples, held_pts, projections, seed);
    q.tag = "iteration " + std::to_string(it);
    pts.push_back(q);
    out.push_back({it, "supervision_loss", q.supervision_loss});
    out.push_back({it, "sliced_w1", q.quality});
  };
  const TrainReport rep = detail::train_model(train_ds, c, LossKind::dsm, std::nullopt, seed, o, "scaling-line", hook);

  CsvWriter pw({"tag", "supervision_loss", "sliced_w1"});
  for (const auto& q : pts) pw.cell(q.tag).cell(q.supervision_loss).cell(q.quality).end_row();
  const LineFit fit = fit_quality_line(pts);
  CsvWriter lw({"slope", "intercept", "residual", "points"});
  lw.cell(fit.slope).cell(fit.intercept).cell(fit.residual).cell(static_cast<int>(pts.size())).end_row();

  RunOutput out;
  out.add("points.csv", pw.str());
  out.add("line.csv", lw.str());
  out.add("loss.csv", detail::loss_csv(rep.loss_curve));
  if (o.svg) {
    SvgPlot p("quality vs supervision loss", "supervision loss", "sliced W1");
    p.markers = true;
    std::vector<std::pair<double, double>> xy, line;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& q : pts) {
      xy.emplace_back(q.supervision_loss, q.quality);
      lo = std::min(lo, q.supervision_loss);
      hi = std::max(hi, q.supervision_loss);
    }
    line = {{lo, fit.slope * lo + fit.intercept}, {hi, fit.slope * hi + fit.intercept}};
    p.add_series("checkpoints", xy);
    p.add_series("OLS fit", line);
    out.add("line.svg", p.render());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dispatch and manifest

inline Dataset load_dataset_config(const Json& cfg, const std::string& path = "dataset") {
  const std::string file = detail::get<std::string>(cfg, path + ".path");
  const std::string fmt = detail::get<std::string>(cfg, path + ".format");
  if (file.empty()) throw ConfigError(path + ".path", "a dataset file is required");
  if (!std::filesystem::exists(file)) throw ConfigError(path + ".path", "file not found: " + file);
  if (fmt != "csv" && fmt != "raw") throw ConfigError(path + ".format", "expected csv or raw");
  try {
    return load_points(file, fmt == "csv" ? PointFormat::csv : PointFormat::raw);
  } catch (const FormatError& e) {
    throw ConfigError(path + ".path", e.what());
  } catch (const EmptyDatasetError& e) {
    throw ConfigError(path + ".path", e.what());
  }
}

// ---------------------------------------------------------------------------
// train: generic training on a point file

inline RunOutput run_train(const Json& cfg, const RunOptions& o) {
  using detail::get;
  const std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
  const Dataset ds = load_dataset_config(cfg);
  Json c = cfg;
  if (get<int>(cfg, "model.data_dim") == 0) c["model"]["data_dim"] = ds.dim();
  const bool conditional = get<bool>(cfg, "conditional");
  if (conditional && !ds.labels) throw ConfigError("conditional", "dataset has no labels");
  const LossKind loss = detail::wrap("train.loss", [&] { return parse_loss_kind(get<std::string>(cfg, "train.loss")); });
  const TrainReport rep = detail::train_model(ds, c, loss, std::nullopt, seed, o, "train", {},
                                              conditional ? std::optional<int>(ds.num_classes) : std::nullopt);
  RunOutput out;
  out.add("loss.csv", detail::loss_csv(rep.loss_curve));
  out.add("checkpoint.bin", detail::checkpoint_bytes(rep.final_checkpoint));
  if (o.svg) out.add("loss.svg", detail::loss_svg(rep.loss_curve, "training loss"));
  return out;
}

inline RunOutput run_experiment(const Json& cfg, const RunOptions& o = {}) {
  const std::string id = detail::get<std::string>(cfg, "experiment");
  if (id == "gaussian") return run_gaussian(cfg, o);
  if (id == "foe") return run_foe(cfg, o);
  if (id == "pat") return run_pat(cfg, o);
  if (id == "cfg-gap") return run_cfg_gap(cfg, o);
  if (id == "memorize-from-t") return run_memorize_from_t(cfg, o);
  if (id == "rstar-profile") return run_rstar_profile(cfg, o);
  if (id == "overlap-curve") return run_overlap_curve(cfg, o);
  if (id == "scaling-line") return run_scaling_line(cfg, o);
  if (id == "train") return run_train(cfg, o);
  throw ConfigError("experiment", "unknown experiment id '" + id + "'");
}

}  // namespace sul
