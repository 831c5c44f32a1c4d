#pragma once

// Fully connected score network with exact reverse-mode gradients.
//
// Input  = feature map of z  ++  sinusoidal time embedding  ++  one-hot class
//          (the last one-hot slot is the null-class token).
// Hidden = affine + GELU, repeated.
// Output = affine head, zero-initialised. The radial-equivariant map feeds only
//          |z| to the trunk and emits (radial, tangential) coefficients that are
//          re-expanded in the local polar frame of z.
//
// Parameters live in one flat vector: for each layer, W (out x in, column
// major) followed by b (out).

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sul/errors.hpp"
#include "sul/numerics.hpp"
#include "sul/schedule.hpp"
#include "sul/score_field.hpp"

namespace sul {

enum class InputMap { identity, polar, radial_equivariant };

inline std::string_view to_string(InputMap m) {
  switch (m) {
    case InputMap::identity: return "identity";
    case InputMap::polar: return "polar";
    case InputMap::radial_equivariant: return "radial-equivariant";
  }
  return "?";
}

inline InputMap parse_input_map(std::string_view s) {
  if (s == "identity" || s == "cartesian") return InputMap::identity;
  if (s == "polar") return InputMap::polar;
  if (s == "radial-equivariant" || s == "equivariant") return InputMap::radial_equivariant;
  throw InvalidArgument("unknown input map '" + std::string(s) + "'");
}

/// (r, cos theta, sin theta) of a 2-vector; the origin maps to (0, 1, 0).
inline Vector polar_features(const Vector& z) {
  if (z.size() != 2) throw InvalidArgument("polar_features requires a 2-vector");
  const double r = z.norm();
  Vector f(3);
  if (r == 0.0)
    f << 0.0, 1.0, 0.0;
  else
    f << r, z[0] / r, z[1] / r;
  return f;
}

struct MlpArchitecture {
  int data_dim = 2;
  std::vector<int> hidden{128, 128};
  InputMap input_map = InputMap::identity;
  int time_frequencies = 16;
  double time_min_frequency = 0.5;
  double time_max_frequency = 50.0;
  int num_classes = 0;  // 0: unconditional network
  PredictionKind prediction = PredictionKind::velocity;

  int feature_dim() const {
    switch (input_map) {
      case InputMap::identity: return data_dim;
      case InputMap::polar: return 3;
      case InputMap::radial_equivariant: return 1;
    }
    return data_dim;
  }
  int time_dim() const { return time_frequencies > 0 ? 2 * time_frequencies : 1; }
  int class_dim() const { return num_classes > 0 ? num_classes + 1 : 0; }
  int input_dim() const { return feature_dim() + time_dim() + class_dim(); }
  int output_dim() const { return input_map == InputMap::radial_equivariant ? 2 : data_dim; }

  std::vector<int> layer_widths() const {
    std::vector<int> w{input_dim()};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(output_dim());
    return w;
  }

  std::size_t parameter_count() const {
    const auto w = layer_widths();
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l)
      n += static_cast<std::size_t>(w[l + 1]) * static_cast<std::size_t>(w[l] + 1);
    return n;
  }

  void validate() const {
    if (data_dim < 1) throw InvalidArgument("network data_dim must be >= 1");
    if ((input_map != InputMap::identity) && data_dim != 2)
      throw InvalidArgument("polar and radial-equivariant input maps require d = 2");
    for (int h : hidden)
      if (h < 1) throw InvalidArgument("hidden widths must be >= 1");
    if (time_frequencies < 0 || num_classes < 0) throw InvalidArgument("negative embedding size");
    if (prediction == PredictionKind::score) throw InvalidArgument("networks predict velocity or x-pred");
  }
};

/// Inputs and regression targets for one gradient evaluation. cls[i] < 0 is
/// the null-class token; an empty cls means unconditional throughout.
struct TrainingBatch {
  RowMatrix z;
  std::vector<double> t;
  std::vector<int> cls;
  RowMatrix target;

  Eigen::Index size() const noexcept { return z.rows(); }
};

class MlpScoreNetwork final : public ScoreField {
 public:
  explicit MlpScoreNetwork(MlpArchitecture arch, std::uint64_t seed = 0, Schedule sched = {})
      : arch_(std::move(arch)), sched_(sched) {
    arch_.validate();
    params_.assign(arch_.parameter_count(), 0.0);
    initialize(seed);
  }

  MlpScoreNetwork(MlpArchitecture arch, std::vector<double> params, Schedule sched = {})
      : arch_(std::move(arch)), sched_(sched), params_(std::move(params)) {
    arch_.validate();
    if (params_.size() != arch_.parameter_count()) throw InvalidArgument("parameter vector has the wrong length");
  }

  const MlpArchitecture& architecture() const noexcept { return arch_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::span<double> parameters() noexcept { return params_; }
  std::span<const double> parameters() const noexcept { return params_; }

  Eigen::Index dim() const override { return arch_.data_dim; }
  PredictionKind kind() const override { return arch_.prediction; }
  const Schedule& schedule() const override { return sched_; }

  /// Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero
  /// biases, zero output layer.
  void initialize(std::uint64_t seed) {
    Rng rng(seed, 0x1417);
    const auto w = arch_.layer_widths();
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      const std::size_t nw = static_cast<std::size_t>(w[l + 1]) * static_cast<std::size_t>(w[l]);
      const bool head = l + 2 == w.size();
      const double bound = 1.0 / std::sqrt(static_cast<double>(w[l]));
      for (std::size_t k = 0; k < nw; ++k) params_[off + k] = head ? 0.0 : rng.uniform(-bound, bound);
      off += nw;
      for (int k = 0; k < w[l + 1]; ++k) params_[off++] = 0.0;
    }
  }

  Vector evaluate(const Vector& z, double t, std::optional<int> cls = std::nullopt) const override {
    if (z.size() != arch_.data_dim) throw InvalidArgument("network input dimension mismatch");
    RowMatrix zb = z.transpose();
    const double tb[1] = {t};
    const int cb[1] = {cls ? *cls : -1};
    return forward(zb, tb, cb).row(0).transpose();
  }

  RowMatrix evaluate_batch(const RowMatrix& z, std::span<const double> t, std::span<const int> cls = {}) const override {
    return forward(z, t, cls);
  }

  RowMatrix forward(const RowMatrix& z, std::span<const double> t, std::span<const int> cls = {}) const {
    Cache cache;
    return run_forward(z, t, cls, cache);
  }

  /// Mean over the batch of |prediction - target|^2 and its exact gradient
  /// with respect to every parameter.
  double loss_and_gradient(const TrainingBatch& batch, std::vector<double>& grad) const {
    if (batch.size() < 1) throw InvalidArgument("empty training batch");
    if (!batch.z.allFinite() || !batch.target.allFinite())
      throw NumericInputError("non-finite value in training batch");
    for (double t : batch.t)
      if (!std::isfinite(t)) throw NumericInputError("non-finite timestep in training batch");
    if (batch.target.cols() != arch_.data_dim || batch.target.rows() != batch.size())
      throw InvalidArgument("target shape does not match batch");

    Cache cache;
    const RowMatrix out = run_forward(batch.z, batch.t, batch.cls, cache);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const RowMatrix diff = out - batch.target;
    const double loss = diff.squaredNorm() * inv_b;

    // d loss / d head output, columns are examples.
    Matrix delta;
    const Eigen::Index b = batch.size();
    if (arch_.input_map == InputMap::radial_equivariant) {
      delta.resize(2, b);
      for (Eigen::Index i = 0; i < b; ++i) {
        const Vector g = 2.0 * inv_b * diff.row(i).transpose();
        const Eigen::Vector2d u = cache.unit.col(i);
        const Eigen::Vector2d u_perp(-u[1], u[0]);
        delta(0, i) = g.dot(u);
        delta(1, i) = g.dot(u_perp);
      }
    } else {
      delta = (2.0 * inv_b) * diff.transpose();
    }

    grad.assign(params_.size(), 0.0);
    const auto w = arch_.layer_widths();
    const std::size_t layers = w.size() - 1;
    for (std::size_t l = layers; l-- > 0;) {
      const std::size_t off = offsets_(l);
      Eigen::Map<Matrix> gw(grad.data() + off, w[l + 1], w[l]);
      Eigen::Map<Vector> gb(grad.data() + off + static_cast<std::size_t>(w[l + 1]) * static_cast<std::size_t>(w[l]), w[l + 1]);
      const Matrix& input = cache.activations[l];
      gw.noalias() = delta * input.transpose();
      gb = delta.rowwise().sum();
      if (l == 0) break;
      Eigen::Map<const Matrix> wl(params_.data() + off, w[l + 1], w[l]);
      Matrix back = wl.transpose() * delta;
      delta = back.cwiseProduct(cache.preactivations[l - 1].unaryExpr([](double x) { return gelu_grad(x); }));
    }
    return loss;
  }

  static double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
  static double gelu_grad(double x) noexcept {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
  }

  /// Network input row for one example (features, time embedding, class).
  Vector input_features(const Vector& z, double t, int cls) const {
    Vector in(arch_.input_dim());
    int k = 0;
    switch (arch_.input_map) {
      case InputMap::identity:
        for (int j = 0; j < arch_.data_dim; ++j) in[k++] = z[j];
        break;
      case InputMap::polar: {
        const Vector f = polar_features(z);
        for (int j = 0; j < 3; ++j) in[k++] = f[j];
        break;
      }
      case InputMap::radial_equivariant:
        in[k++] = z.norm();
        break;
    }
    if (arch_.time_frequencies == 0) {
      in[k++] = t;
    } else {
      for (int f = 0; f < arch_.time_frequencies; ++f) {
        const double w = frequency(f);
        in[k++] = std::sin(w * t);
        in[k++] = std::cos(w * t);
      }
    }
    if (arch_.num_classes > 0) {
      if (cls >= arch_.num_classes) throw InvalidArgument("unknown class id " + std::to_string(cls));
      for (int c = 0; c <= arch_.num_classes; ++c) in[k + c] = 0.0;
      in[k + (cls < 0 ? arch_.num_classes : cls)] = 1.0;
    } else if (cls >= 0) {
      throw InvalidArgument("unconditional network received class id " + std::to_string(cls));
    }
    return in;
  }

 private:
  struct Cache {
    std::vector<Matrix> activations;     // input to layer l (in_l x B)
    std::vector<Matrix> preactivations;  // hidden pre-activations (out_l x B)
    Matrix unit;                         // 2 x B unit vectors (equivariant map)
  };

  double frequency(int f) const {
    if (arch_.time_frequencies == 1) return arch_.time_min_frequency;
    const double ratio = arch_.time_max_frequency / arch_.time_min_frequency;
    return arch_.time_min_frequency * std::pow(ratio, static_cast<double>(f) / (arch_.time_frequencies - 1));
  }

  std::size_t offsets_(std::size_t layer) const {
    const auto w = arch_.layer_widths();
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l)
      off += static_cast<std::size_t>(w[l + 1]) * static_cast<std::size_t>(w[l] + 1);
    return off;
  }

  RowMatrix run_forward(const RowMatrix& z, std::span<const double> t, std::span<const int> cls, Cache& cache) const {
    const Eigen::Index b = z.rows();
    if (z.cols() != arch_.data_dim) throw InvalidArgument("network input dimension mismatch");
    if (static_cast<Eigen::Index>(t.size()) != b) throw InvalidArgument("timestep count does not match batch");
    if (!cls.empty() && static_cast<Eigen::Index>(cls.size()) != b) throw InvalidArgument("class count does not match batch");

    Matrix x(arch_.input_dim(), b);
    for (Eigen::Index i = 0; i < b; ++i)
      x.col(i) = input_features(z.row(i).transpose(), t[static_cast<std::size_t>(i)],
                                cls.empty() ? -1 : cls[static_cast<std::size_t>(i)]);

    const auto w = arch_.layer_widths();
    const std::size_t layers = w.size() - 1;
    cache.activations.clear();
    cache.preactivations.clear();
    std::size_t off = 0;
    for (std::size_t l = 0; l < layers; ++l) {
      Eigen::Map<const Matrix> wl(params_.data() + off, w[l + 1], w[l]);
      Eigen::Map<const Vector> bl(params_.data() + off + static_cast<std::size_t>(w[l + 1]) * static_cast<std::size_t>(w[l]), w[l + 1]);
      off += static_cast<std::size_t>(w[l + 1]) * static_cast<std::size_t>(w[l] + 1);
      Matrix a = wl * x;
      a.colwise() += bl;
      cache.activations.push_back(std::move(x));
      if (l + 1 == layers) {
        x = std::move(a);
      } else {
        x = a.unaryExpr([](double v) { return gelu(v); });
        cache.preactivations.push_back(std::move(a));
      }
    }

    RowMatrix out(b, arch_.data_dim);
    if (arch_.input_map == InputMap::radial_equivariant) {
      cache.unit.resize(2, b);
      for (Eigen::Index i = 0; i < b; ++i) {
        const double r = z.row(i).norm();
        Eigen::Vector2d u = r > 0.0 ? Eigen::Vector2d(z(i, 0) / r, z(i, 1) / r) : Eigen::Vector2d(1.0, 0.0);
        cache.unit.col(i) = u;
        out(i, 0) = x(0, i) * u[0] - x(1, i) * u[1];
        out(i, 1) = x(0, i) * u[1] + x(1, i) * u[0];
      }
    } else {
      out = x.transpose();
    }
    return out;
  }

  MlpArchitecture arch_;
  Schedule sched_;
  std::vector<double> params_;
};

inline Prediction mlp_forward(const MlpScoreNetwork& net, const Vector& z, double t, std::optional<int> cls = std::nullopt) {
  return net.predict(z, t, cls);
}

inline std::pair<double, std::vector<double>> mlp_backward(const MlpScoreNetwork& net, const TrainingBatch& batch) {
  std::vector<double> grad;
  const double loss = net.loss_and_gradient(batch, grad);
  return {loss, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "SUCK", u32 version, then the architecture block:
//   u32 data_dim, u32 hidden_count, u32 widths[hidden_count], u32 input_map,
//   u32 time_frequencies, f64 time_min_frequency, f64 time_max_frequency,
//   u32 num_classes, u32 prediction (1 velocity, 2 x-pred),
//   u64 parameter_count, u32 has_ema
// followed by parameter_count little-endian f64, then the EMA copy if present.

struct Checkpoint {
  MlpArchitecture arch;
  std::vector<double> params;
  std::optional<std::vector<double>> ema;
};

namespace detail {
inline constexpr char kCheckpointMagic[4] = {'S', 'U', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, std::ostream& out) {
  using detail::write_le;
  out.write(detail::kCheckpointMagic, 4);
  write_le(out, detail::kCheckpointVersion);
  write_le(out, static_cast<std::uint32_t>(ck.arch.data_dim));
  write_le(out, static_cast<std::uint32_t>(ck.arch.hidden.size()));
  for (int h : ck.arch.hidden) write_le(out, static_cast<std::uint32_t>(h));
  write_le(out, static_cast<std::uint32_t>(ck.arch.input_map));
  write_le(out, static_cast<std::uint32_t>(ck.arch.time_frequencies));
  write_le(out, ck.arch.time_min_frequency);
  write_le(out, ck.arch.time_max_frequency);
  write_le(out, static_cast<std::uint32_t>(ck.arch.num_classes));
  write_le(out, static_cast<std::uint32_t>(ck.arch.prediction));
  write_le(out, static_cast<std::uint64_t>(ck.params.size()));
  write_le(out, static_cast<std::uint32_t>(ck.ema ? 1 : 0));
  for (double p : ck.params) write_le(out, p);
  if (ck.ema)
    for (double p : *ck.ema) write_le(out, p);
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  save_checkpoint(ck, out);
}

inline Checkpoint load_checkpoint(std::istream& in) {
  using detail::read_le;
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, detail::kCheckpointMagic, 4) != 0)
    throw FormatError("not a checkpoint (bad magic)", 0);
  std::uint32_t version = 0, u = 0;
  if (!read_le(in, version) || version != detail::kCheckpointVersion) throw FormatError("unsupported checkpoint version", 0);
  Checkpoint ck;
  auto need = [&](auto& v) {
    if (!read_le(in, v)) throw FormatError("truncated checkpoint header", 0);
  };
  need(u);
  ck.arch.data_dim = static_cast<int>(u);
  std::uint32_t nh = 0;
  need(nh);
  ck.arch.hidden.clear();
  for (std::uint32_t i = 0; i < nh; ++i) {
    need(u);
    ck.arch.hidden.push_back(static_cast<int>(u));
  }
  need(u);
  if (u > 2) throw FormatError("unknown input map in checkpoint", 0);
  ck.arch.input_map = static_cast<InputMap>(u);
  need(u);
  ck.arch.time_frequencies = static_cast<int>(u);
  need(ck.arch.time_min_frequency);
  need(ck.arch.time_max_frequency);
  need(u);
  ck.arch.num_classes = static_cast<int>(u);
  need(u);
  if (u != 1 && u != 2) throw FormatError("unknown prediction kind in checkpoint", 0);
  ck.arch.prediction = static_cast<PredictionKind>(u);
  std::uint64_t count = 0;
  need(count);
  std::uint32_t has_ema = 0;
  need(has_ema);
  ck.arch.validate();
  if (count != ck.arch.parameter_count()) throw FormatError("parameter count does not match architecture", 0);
  auto read_block = [&] {
    std::vector<double> p(count);
    for (auto& v : p)
      if (!read_le(in, v)) throw FormatError("truncated checkpoint parameters", 0);
    return p;
  };
  ck.params = read_block();
  if (has_ema) ck.ema = read_block();
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string(), 0);
  return load_checkpoint(in);
}

}  // namespace sul
