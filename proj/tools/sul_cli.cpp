// sul: experiment runner and diagnostics front end.
//
// Exit codes: 0 success, 2 config or validation error (nothing written),
// 3 numeric failure during a run.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sul/manifest.hpp"

namespace fs = std::filesystem;
using namespace sul;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string format = "csv";
  std::string out;
  bool quiet = false;
};

void apply_threads(const Common& c) {
  int n = c.threads;
  if (n <= 0)
    if (const char* env = std::getenv("SUL_THREADS")) {
      try {
        n = std::stoi(env);
      } catch (const std::exception&) {
        throw ConfigError("SUL_THREADS", "not an integer");
      }
    }
  set_max_threads(n > 0 ? n : 1);
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "override the config seed");
  app->add_option("--threads", c.threads, "worker cap (SUL_THREADS if unset; 1 is bit-reproducible)");
  app->add_option("--format", c.format, "artifact set")->check(CLI::IsMember({"csv", "csv+svg"}));
  app->add_option("--out", c.out, "output directory");
  app->add_flag("--quiet", c.quiet, "no progress lines");
}

RunOptions options(const Common& c) {
  RunOptions o;
  o.svg = c.format == "csv+svg";
  o.log = c.quiet ? nullptr : &std::cerr;
  return o;
}

int finish(const Json& cfg, const RunOutput& out, const fs::path& dir, const std::string& command,
           std::chrono::system_clock::time_point started, std::chrono::steady_clock::time_point t0) {
  RunOutput all = out;
  all.add("config.json", cfg.dump(2) + "\n");
  ManifestInfo info;
  info.command = command;
  info.started = started;
  info.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  info.threads = max_threads();
  write_run(dir, all, make_manifest(cfg, all, info));
  std::cerr << "wrote " << all.files.size() << " artifacts to " << dir.string() << '\n';
  return 0;
}

int run_config(Json cfg, const Common& c, const std::string& command) {
  if (c.seed) cfg["seed"] = *c.seed;
  apply_threads(c);
  fs::path dir = c.out;
  if (dir.empty()) dir = cfg.value("output", std::string());
  if (dir.empty()) dir = fs::path("runs") / cfg["experiment"].get<std::string>();
  const auto started = std::chrono::system_clock::now();
  const auto t0 = std::chrono::steady_clock::now();
  const RunOutput out = run_experiment(cfg, options(c));
  return finish(cfg, out, dir, command, started, t0);
}

// ---------------------------------------------------------------------------
// diagnose

const std::vector<std::string>& metric_ids() {
  static const std::vector<std::string> ids{"supervision-loss", "extrapolation-loss", "rstar",
                                            "overlap",          "cfg-gap",            "memorization"};
  return ids;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
  return s;
}

struct DiagnoseArgs {
  std::string checkpoint, data, metric, data_format = "csv";
  int n = 1000, timesteps = 100, grid = 100, calibration_n = 8;
  double threshold = 1.0 / 3.0;
  std::optional<int> cls;
  bool use_ema = true;
};

std::string diagnose(const DiagnoseArgs& a, std::uint64_t seed) {
  const auto& ids = metric_ids();
  if (std::find(ids.begin(), ids.end(), a.metric) == ids.end())
    throw ConfigError("metric", "unknown metric '" + a.metric + "'; valid ids: " + join(ids));
  Json dcfg{{"dataset", {{"path", a.data}, {"format", a.data_format}}}};
  const Dataset ds = load_dataset_config(dcfg);
  if (!fs::exists(a.checkpoint)) throw ConfigError("checkpoint", "file not found: " + a.checkpoint);
  Checkpoint ck;
  try {
    ck = load_checkpoint(fs::path(a.checkpoint));
  } catch (const FormatError& e) {
    throw ConfigError("checkpoint", e.what());
  }
  const MlpScoreNetwork net(ck.arch, a.use_ema && ck.ema ? *ck.ema : ck.params);
  if (net.dim() != ds.dim()) throw ConfigError("data", "dataset dimension does not match the checkpoint");
  if (a.n < 1 || a.timesteps < 1 || a.grid < 1) throw ConfigError("n", "--n, --timesteps and --grid must be >= 1");
  if (a.cls && (*a.cls < 0 || (ds.labels && *a.cls >= ds.num_classes)))
    throw ConfigError("class", "class out of range");
  if (a.cls && ck.arch.num_classes == 0 && a.metric != "overlap")
    throw ConfigError("class", "checkpoint is unconditional");

  EstimatorConfig ec;
  ec.n = a.n;
  ec.timesteps = a.timesteps;
  ec.seed = seed;
  ec.cls = a.cls;
  if (a.metric == "supervision-loss" || a.metric == "extrapolation-loss") {
    const Region region = a.metric == "supervision-loss" ? Region::supervision : Region::extrapolation;
    const OracleField oracle(ds, net.schedule());
    const RegionEstimate e = score_error(net, oracle, region, ds, ec);
    std::vector<MetricRow> rows;
    append_estimate(rows, a.metric, e, seed, false);
    return metrics_csv(rows);
  }
  if (a.metric == "rstar") {
    const SampleResult res = sample(net, a.n, SolverConfig{}, seed, true, a.cls);
    std::vector<double> grid;
    for (int k = 0; k < a.grid; ++k) grid.push_back(1e-3 + (1.0 - 2e-3) * (a.grid == 1 ? 0.5 : double(k) / (a.grid - 1)));
    CsvWriter w({"t", "sample", "r_star"});
    for (const auto& r : rstar_profile(ds, res.trajectories, grid)) w.cell(r.t).cell(r.sample).cell(r.r_star).end_row();
    return w.str();
  }
  if (a.metric == "overlap") {
    std::vector<double> ts;
    for (int k = 1; k <= a.grid; ++k) ts.push_back(double(k) / (a.grid + 1));
    CsvWriter w({"t", "overlap"});
    for (const auto& [t, c] : overlap_curve(ds, ts, a.cls)) w.cell(t).cell(c).end_row();
    return w.str();
  }
  if (a.metric == "cfg-gap") {
    if (ck.arch.num_classes == 0) throw ConfigError("checkpoint", "cfg-gap needs a conditional checkpoint");
    CfgGapConfig gc;
    gc.n = a.n;
    gc.seed = seed;
    if (a.cls) gc.classes = {*a.cls};
    const OracleField oracle(ds, net.schedule());
    CsvWriter w({"source", "region", "t", "median", "p10", "p90", "mean_score_norm"});
    auto emit = [&](const char* src, const ScoreField& f, Region r) {
      for (const auto& g : cfg_gap_curve(f, f, r, ds, gc))
        w.cell(src).cell(to_string(r)).cell(g.t).cell(g.median).cell(g.p10).cell(g.p90).cell(g.mean_score_norm).end_row();
    };
    emit("oracle", oracle, Region::supervision);
    emit("model", net, Region::extrapolation);
    return w.str();
  }
  // memorization
  if (a.calibration_n < 1 || a.calibration_n > ds.size()) throw ConfigError("calibration-n", "must lie in [1, dataset size]");
  if (!(a.threshold > 0.0 && a.threshold < 1.0)) throw ConfigError("threshold", "must lie in (0, 1)");
  const SampleResult res = sample(net, a.n, SolverConfig{}, seed, false, a.cls);
  const auto cal = calibrated_l2_all(res.samples, ds.points, a.calibration_n);
  CsvWriter w({"memorization_ratio", "mean_calibrated_l2", "threshold", "samples"});
  w.cell(memorization_ratio(res.samples, ds.points, a.calibration_n, a.threshold))
      .cell(compensated_mean(cal))
      .cell(a.threshold)
      .cell(a.n)
      .end_row();
  return w.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sul: selective underfitting experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  Common common;
  std::string config_path, positional_config;

  auto* run = app.add_subcommand("run", "run an experiment from a JSON config");
  run->add_option("--config", config_path, "config file");
  run->add_option("path", positional_config, "config file (positional form)");
  add_common(run, common);

  auto* train = app.add_subcommand("train", "train a network on a point file");
  std::string train_data, train_format = "csv";
  train->add_option("--config", config_path, "config with model/train sections");
  train->add_option("--data", train_data, "point file (overrides dataset.path)");
  train->add_option("--data-format", train_format, "csv or raw")->check(CLI::IsMember({"csv", "raw"}));
  add_common(train, common);

  auto* samp = app.add_subcommand("sample", "draw samples from a checkpoint");
  std::string ckpt;
  int n_samples = 100, fixed_steps = 100;
  std::optional<int> sample_class;
  std::string solver_kind = "rk45";
  bool raw_params = false;
  samp->add_option("checkpoint", ckpt, "checkpoint file")->required();
  samp->add_option("--n", n_samples, "number of samples");
  samp->add_option("--class", sample_class, "class for conditional checkpoints");
  samp->add_option("--solver", solver_kind, "rk45, heun or euler");
  samp->add_option("--steps", fixed_steps, "steps for fixed-step solvers");
  samp->add_flag("--raw", raw_params, "use raw parameters instead of the EMA copy");
  add_common(samp, common);

  auto* diag = app.add_subcommand("diagnose", "run one diagnostic on a checkpoint and dataset");
  DiagnoseArgs da;
  std::uint64_t diag_seed = 0;
  int diag_threads = 0;
  std::string diag_out;
  diag->add_option("checkpoint", da.checkpoint, "checkpoint file")->required();
  diag->add_option("data", da.data, "point file")->required();
  diag->add_option("metric", da.metric, "metric id: " + join(metric_ids()))->required();
  diag->add_option("--data-format", da.data_format, "csv or raw");
  diag->add_option("--n", da.n, "samples");
  diag->add_option("--timesteps", da.timesteps, "timesteps per estimate");
  diag->add_option("--grid", da.grid, "grid points");
  diag->add_option("--class", da.cls, "class");
  diag->add_option("--calibration-n", da.calibration_n, "neighbours in the calibrated distance");
  diag->add_option("--threshold", da.threshold, "memorization threshold");
  diag->add_option("--seed", diag_seed, "seed");
  diag->add_option("--threads", diag_threads, "worker cap");
  diag->add_option("--out", diag_out, "CSV file (stdout if unset)");

  auto* defaults = app.add_subcommand("print-defaults", "print the full default config of an experiment");
  std::string defaults_id;
  defaults->add_option("experiment", defaults_id, "experiment id")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*defaults) {
      std::cout << experiment_defaults(defaults_id).dump(2) << '\n';
      return 0;
    }
    if (*run) {
      const std::string path = config_path.empty() ? positional_config : config_path;
      if (path.empty()) throw ConfigError("config", "a config file is required");
      return run_config(load_config(path), common, "run " + path);
    }
    if (*train) {
      Json user = config_path.empty() ? Json{{"experiment", "train"}, {"seed", 0}} : Json();
      if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("<file>", "cannot open config " + config_path);
        try {
          user = Json::parse(in);
        } catch (const Json::parse_error& e) {
          throw ConfigError("<root>", std::string("parse error: ") + e.what());
        }
        if (!user.is_object()) throw ConfigError("<root>", "config must be an object");
        if (!user.contains("experiment")) user["experiment"] = "train";
        if (user["experiment"] != "train") throw ConfigError("experiment", "train expects experiment \"train\"");
      }
      if (!train_data.empty()) {
        user["dataset"]["path"] = train_data;
        user["dataset"]["format"] = train_format;
      }
      return run_config(merge_config(user), common, "train");
    }
    if (*samp) {
      apply_threads(common);
      if (n_samples < 1) throw ConfigError("n", "must be >= 1");
      if (!fs::exists(ckpt)) throw ConfigError("checkpoint", "file not found: " + ckpt);
      Checkpoint ck;
      try {
        ck = load_checkpoint(fs::path(ckpt));
      } catch (const FormatError& e) {
        throw ConfigError("checkpoint", e.what());
      }
      const MlpScoreNetwork net(ck.arch, !raw_params && ck.ema ? *ck.ema : ck.params);
      if (sample_class && (ck.arch.num_classes == 0 || *sample_class < 0 || *sample_class >= ck.arch.num_classes))
        throw ConfigError("class", "class out of range for this checkpoint");
      SolverConfig sc;
      try {
        sc.kind = parse_solver_kind(solver_kind);
      } catch (const InvalidArgument& e) {
        throw ConfigError("solver", e.what());
      }
      sc.fixed_steps = fixed_steps;
      try {
        sc.validate();
      } catch (const InvalidArgument& e) {
        throw ConfigError("steps", e.what());
      }
      const std::uint64_t seed = common.seed.value_or(0);
      Json cfg{{"command", "sample"},     {"checkpoint", ckpt},  {"n", n_samples}, {"solver", solver_kind},
               {"steps", fixed_steps},    {"seed", seed},        {"ema", !raw_params}};
      if (sample_class) cfg["class"] = *sample_class;
      const auto started = std::chrono::system_clock::now();
      const auto t0 = std::chrono::steady_clock::now();
      const SampleResult res = sample(net, n_samples, sc, seed, false, sample_class);
      RunOutput out;
      std::vector<std::string> header;
      for (Eigen::Index j = 0; j < res.samples.cols(); ++j) header.push_back("z" + std::to_string(j));
      CsvWriter w(header);
      for (Eigen::Index i = 0; i < res.samples.rows(); ++i) {
        for (Eigen::Index j = 0; j < res.samples.cols(); ++j) w.cell(res.samples(i, j));
        w.end_row();
      }
      out.add("samples.csv", w.str());
      return finish(cfg, out, common.out.empty() ? fs::path("runs/sample") : fs::path(common.out), "sample", started, t0);
    }
    if (*diag) {
      Common c;
      c.threads = diag_threads;
      apply_threads(c);
      const std::string csv = diagnose(da, diag_seed);
      if (diag_out.empty()) {
        std::cout << csv;
      } else {
        std::ofstream f(diag_out, std::ios::binary);
        f << csv;
        if (!f) throw Error("cannot write " + diag_out);
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << " (iteration " << e.iteration() << ")\n";
    return kExitNumeric;
  } catch (const DivergenceError& e) {
    std::cerr << "numeric failure: " << e.what() << " (last t " << e.last_time() << ")\n";
    return kExitNumeric;
  } catch (const NumericInputError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const RankDeficiencyError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const SingularTimeError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
