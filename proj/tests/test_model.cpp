#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "sul/krr.hpp"
#include "sul/mlp.hpp"

using namespace sul;

namespace {

MlpArchitecture small_arch(InputMap map = InputMap::identity, int classes = 0) {
  MlpArchitecture a;
  a.data_dim = 2;
  a.hidden = {8, 8};
  a.input_map = map;
  a.time_frequencies = 3;
  a.num_classes = classes;
  a.prediction = PredictionKind::velocity;
  return a;
}

void randomize(MlpScoreNetwork& net, std::uint64_t seed, double scale = 0.5) {
  Rng r(seed);
  for (double& p : net.parameters()) p = scale * r.normal();
}

TrainingBatch random_batch(Rng& r, int b, int d, int classes) {
  TrainingBatch batch;
  batch.z.resize(b, d);
  batch.target.resize(b, d);
  for (int i = 0; i < b; ++i) {
    batch.z.row(i) = r.normal_vector(d).transpose();
    batch.target.row(i) = r.normal_vector(d).transpose();
    batch.t.push_back(r.uniform(0.01, 0.99));
    if (classes > 0) batch.cls.push_back(static_cast<int>(r.index(static_cast<std::size_t>(classes + 1))) - 1);
  }
  return batch;
}

Eigen::Matrix2d rotation(double phi) {
  Eigen::Matrix2d r;
  r << std::cos(phi), -std::sin(phi), std::sin(phi), std::cos(phi);
  return r;
}

}  // namespace

TEST(Mlp, ZeroHeadGivesZeroOutput) {
  MlpScoreNetwork net(small_arch(), 3);
  Rng r(1);
  for (int k = 0; k < 20; ++k) EXPECT_EQ(net.evaluate(r.normal_vector(2), r.uniform()).norm(), 0.0);
}

TEST(Mlp, DeterministicAndBatchConsistent) {
  MlpScoreNetwork net(small_arch(InputMap::identity, 3), 3);
  randomize(net, 5);
  Rng r(2);
  const TrainingBatch b = random_batch(r, 16, 2, 3);
  const RowMatrix once = net.forward(b.z, b.t, b.cls);
  EXPECT_EQ(once, net.forward(b.z, b.t, b.cls));
  for (int i = 0; i < 16; ++i) {
    std::optional<int> c;
    if (b.cls[static_cast<std::size_t>(i)] >= 0) c = b.cls[static_cast<std::size_t>(i)];
    const Vector single = net.evaluate(b.z.row(i).transpose(), b.t[static_cast<std::size_t>(i)], c);
    EXPECT_LT((single - once.row(i).transpose()).norm(), 1e-13);
  }
}

TEST(Mlp, NullTokenIsTheUnconditionalPath) {
  MlpScoreNetwork net(small_arch(InputMap::identity, 2), 3);
  randomize(net, 6);
  Rng r(3);
  for (int k = 0; k < 20; ++k) {
    const Vector z = r.normal_vector(2);
    const double t = r.uniform();
    RowMatrix zb = z.transpose();
    const double tb[1] = {t};
    const int null_token[1] = {-1};
    EXPECT_EQ(net.evaluate(z, t), net.forward(zb, tb, null_token).row(0).transpose());
    EXPECT_EQ(net.evaluate(z, t), net.forward(zb, tb).row(0).transpose());
  }
  EXPECT_THROW(net.evaluate(Vector::Zero(2), 0.5, 2), InvalidArgument);
  MlpScoreNetwork uncond(small_arch(), 3);
  EXPECT_THROW(uncond.evaluate(Vector::Zero(2), 0.5, 0), InvalidArgument);
}

TEST(Mlp, InputDimensionBookkeeping) {
  MlpArchitecture a = small_arch(InputMap::polar, 4);
  EXPECT_EQ(a.input_dim(), 3 + 6 + 5);
  a.input_map = InputMap::radial_equivariant;
  EXPECT_EQ(a.input_dim(), 1 + 6 + 5);
  EXPECT_EQ(a.output_dim(), 2);
  MlpArchitecture bad = small_arch(InputMap::polar);
  bad.data_dim = 3;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(Mlp, GradientsMatchCentralDifferences) {
  for (auto map : {InputMap::identity, InputMap::polar, InputMap::radial_equivariant}) {
    MlpScoreNetwork net(small_arch(map, 2), 1);
    Rng r(static_cast<std::uint64_t>(map) + 10);
    for (int batch_id = 0; batch_id < 20; ++batch_id) {
      randomize(net, 100 + static_cast<std::uint64_t>(batch_id));
      const TrainingBatch b = random_batch(r, 6, 2, 2);
      std::vector<double> grad;
      net.loss_and_gradient(b, grad);
      std::vector<double> scratch;
      const double h = 1e-5;
      double worst = 0.0;
      for (std::size_t p = 0; p < grad.size(); ++p) {
        const double keep = net.parameters()[p];
        net.parameters()[p] = keep + h;
        const double lp = net.loss_and_gradient(b, scratch);
        net.parameters()[p] = keep - h;
        const double lm = net.loss_and_gradient(b, scratch);
        net.parameters()[p] = keep;
        const double fd = (lp - lm) / (2 * h);
        const double denom = std::max({std::abs(fd), std::abs(grad[p]), 1e-6});
        worst = std::max(worst, std::abs(fd - grad[p]) / denom);
      }
      EXPECT_LT(worst, 1e-4) << "map " << to_string(map) << " batch " << batch_id;
    }
  }
}

TEST(Mlp, ZeroResidualGivesZeroLossAndGradient) {
  MlpScoreNetwork net(small_arch(), 1);
  randomize(net, 7);
  Rng r(4);
  TrainingBatch b = random_batch(r, 10, 2, 0);
  b.target = net.forward(b.z, b.t);
  std::vector<double> grad;
  EXPECT_EQ(net.loss_and_gradient(b, grad), 0.0);
  for (double g : grad) EXPECT_EQ(g, 0.0);
}

TEST(Mlp, DuplicatedBatchLeavesLossAndGradient) {
  MlpScoreNetwork net(small_arch(InputMap::identity, 2), 1);
  randomize(net, 8);
  Rng r(5);
  const TrainingBatch b = random_batch(r, 7, 2, 2);
  TrainingBatch bb;
  bb.z.resize(14, 2);
  bb.z << b.z, b.z;
  bb.target.resize(14, 2);
  bb.target << b.target, b.target;
  bb.t = b.t;
  bb.t.insert(bb.t.end(), b.t.begin(), b.t.end());
  bb.cls = b.cls;
  bb.cls.insert(bb.cls.end(), b.cls.begin(), b.cls.end());
  std::vector<double> g1, g2;
  const double l1 = net.loss_and_gradient(b, g1), l2 = net.loss_and_gradient(bb, g2);
  EXPECT_NEAR(l1, l2, 1e-13 * l1);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g1[i], g2[i], 1e-12 * (1 + std::abs(g1[i])));
}

TEST(Mlp, NanInputsAreRejected) {
  MlpScoreNetwork net(small_arch(), 1);
  Rng r(6);
  TrainingBatch b = random_batch(r, 4, 2, 0);
  b.z(1, 0) = std::nan("");
  std::vector<double> g;
  EXPECT_THROW(net.loss_and_gradient(b, g), NumericInputError);
  b = random_batch(r, 4, 2, 0);
  b.t[2] = std::nan("");
  EXPECT_THROW(net.loss_and_gradient(b, g), NumericInputError);
  TrainingBatch empty;
  EXPECT_THROW(net.loss_and_gradient(empty, g), InvalidArgument);
}

TEST(Mlp, RadialEquivariance) {
  MlpScoreNetwork net(small_arch(InputMap::radial_equivariant), 2);
  randomize(net, 9, 1.0);
  Rng r(7);
  for (int k = 0; k < 100; ++k) {
    const Vector z = 2.0 * r.normal_vector(2);
    const double t = r.uniform(), phi = r.uniform(0, 2 * std::numbers::pi);
    const Eigen::Matrix2d rot = rotation(phi);
    const Vector lhs = net.evaluate(rot * z, t);
    const Vector rhs = rot * net.evaluate(z, t);
    EXPECT_LT((lhs - rhs).norm(), 1e-10);
  }
}

TEST(PolarFeatures, Examples) {
  Vector a(2), b(2);
  a << 1, 0;
  b << 0, 2;
  EXPECT_EQ(polar_features(a), (Vector(3) << 1, 1, 0).finished());
  EXPECT_EQ(polar_features(b), (Vector(3) << 2, 0, 1).finished());
  EXPECT_EQ(polar_features(Vector::Zero(2)), (Vector(3) << 0, 1, 0).finished());
  EXPECT_THROW(polar_features(Vector::Zero(3)), InvalidArgument);
}

TEST(Checkpoint, RoundTripWithEma) {
  MlpScoreNetwork net(small_arch(InputMap::polar, 3), 4);
  randomize(net, 10);
  Checkpoint ck{net.architecture(), {net.parameters().begin(), net.parameters().end()}, std::nullopt};
  std::vector<double> ema(ck.params);
  for (double& v : ema) v *= 0.5;
  ck.ema = ema;
  std::stringstream buf;
  save_checkpoint(ck, buf);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 4), "SUCK");
  const Checkpoint back = load_checkpoint(buf);
  EXPECT_EQ(back.params, ck.params);
  ASSERT_TRUE(back.ema);
  EXPECT_EQ(*back.ema, ema);
  EXPECT_EQ(back.arch.hidden, ck.arch.hidden);
  EXPECT_EQ(back.arch.input_map, InputMap::polar);
  EXPECT_EQ(back.arch.num_classes, 3);
  MlpScoreNetwork restored(back.arch, back.params);
  EXPECT_EQ(restored.evaluate(Vector::Ones(2), 0.3, 1), net.evaluate(Vector::Ones(2), 0.3, 1));

  std::stringstream bad("NOPE");
  EXPECT_THROW(load_checkpoint(bad), FormatError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 9));
  EXPECT_THROW(load_checkpoint(truncated), FormatError);
}

TEST(Krr, SingleSampleClosedForm) {
  Vector a(2), y(3);
  a << 0.3, -0.1;
  y << 1.0, 2.0, -4.0;
  const double ridge = 0.25;
  const KrrDenoiser k = krr_fit({{a, y}}, 3.0, ridge);
  EXPECT_LT((k.predict(a) - y / (1 + ridge)).norm(), 1e-14);
}

TEST(Krr, LargeRidgeShrinksToZeroAndFarQueriesDecay) {
  Rng r(11);
  std::vector<std::pair<Vector, Vector>> s;
  for (int i = 0; i < 20; ++i) s.emplace_back(r.normal_vector(2), r.normal_vector(1));
  const KrrDenoiser heavy = krr_fit(s, 2.0, 1e9);
  EXPECT_LT(heavy.predict(Vector::Zero(2)).norm(), 1e-7);
  const KrrDenoiser k = krr_fit(s, 2.0, 1e-3);
  EXPECT_LT(k.predict(Vector::Constant(2, 50.0)).norm(), 1e-12);
}

TEST(Krr, InterpolatesAndSatisfiesResidual) {
  Rng r(12);
  std::vector<std::pair<Vector, Vector>> s;
  for (int i = 0; i < 10; ++i) s.emplace_back(3.0 * r.normal_vector(2), r.normal_vector(2));
  const KrrDenoiser k = krr_fit(s, 1.0, 1e-10);
  for (const auto& [a, y] : s) EXPECT_LT((k.predict(a) - y).norm(), 1e-6);
  EXPECT_LT(k.residual(), 1e-8);
  Matrix sys = k.gram();
  sys.diagonal().array() += k.ridge();
  Matrix targets(10, 2);
  for (int i = 0; i < 10; ++i) targets.row(i) = s[static_cast<std::size_t>(i)].second.transpose();
  EXPECT_LT((sys * k.coefficients() - targets).norm() / targets.norm(), 1e-8);
}

TEST(Krr, PermutationInvariant) {
  Rng r(13);
  std::vector<std::pair<Vector, Vector>> s;
  for (int i = 0; i < 30; ++i) s.emplace_back(r.normal_vector(3), r.normal_vector(2));
  auto p = s;
  std::reverse(p.begin(), p.end());
  const KrrDenoiser a = krr_fit(s, 1.5, 1e-4), b = krr_fit(p, 1.5, 1e-4);
  for (int k = 0; k < 20; ++k) {
    const Vector q = r.normal_vector(3);
    EXPECT_LT((a.predict(q) - b.predict(q)).norm(), 1e-10);
  }
}

TEST(Krr, DuplicateInputsWithoutRidgeAreRankDeficient) {
  Vector a = Vector::Ones(2), y = Vector::Ones(1);
  EXPECT_THROW(krr_fit({{a, y}, {a, y}}, 1.0, 0.0), RankDeficiencyError);
  EXPECT_THROW(krr_fit({}, 1.0, 0.0), InvalidArgument);
  const KrrDenoiser k = krr_fit({{a, y}}, 1.0, 0.0);
  EXPECT_THROW(k.predict(Vector::Ones(3)), InvalidArgument);
}

TEST(Krr, PolarAndCartesianFieldsShareTheFitRoutine) {
  const Dataset ds = make_pat_toy_dataset();
  KrrFieldConfig cfg;
  cfg.samples = 200;
  cfg.input_map = InputMap::identity;
  const KrrField cart = fit_krr_field(ds, cfg, 1);
  cfg.input_map = InputMap::polar;
  const KrrField polar = fit_krr_field(ds, cfg, 1);
  EXPECT_EQ(cart.denoiser().feature_dim(), 3);
  EXPECT_EQ(polar.denoiser().feature_dim(), 4);
  EXPECT_EQ(polar.kind(), PredictionKind::x_pred);
  EXPECT_LT(polar.denoiser().residual(), 1e-8);
}
