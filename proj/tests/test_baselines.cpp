#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "exoc/baselines.hpp"
#include "exoc/error.hpp"
#include "exoc/numkernel.hpp"

using namespace exoc;

namespace {

double rel_err(double a, double b) { return std::fabs(a - b) / std::max(1.0, std::fabs(b)); }

ScoreModel linear(double w, double b) {
  auto m = ScoreModel::scalar_linear();
  m.params()[0] = w;
  m.params()[1] = b;
  return m;
}

std::vector<PairSample> samples(std::size_t n, double obs_rate, bool binary, std::uint64_t seed) {
  RngStream rng(seed, 3);
  std::vector<PairSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].x = rng.normal();
    out[i].observed = rng.uniform() < obs_rate;
    out[i].label = binary ? (rng.uniform() < 0.5 ? 1.0 : 0.0) : 2 * rng.normal();
    out[i].key = i;
  }
  return out;
}

}  // namespace

TEST(PredictionError, Values) {
  EXPECT_NEAR(prediction_error(1, 1 - 1e-12, ErrorKind::cross_entropy), 0.0, 1e-11);
  EXPECT_NEAR(prediction_error(1, 0.5, ErrorKind::cross_entropy), std::log(2.0), 1e-15);
  EXPECT_NEAR(prediction_error(0, 0.8, ErrorKind::cross_entropy), 1.6094379124341003, 1e-12);
  EXPECT_EQ(prediction_error(0.5, 2.0, ErrorKind::squared), 2.25);
  EXPECT_THROW(prediction_error(1, 1.0, ErrorKind::cross_entropy), ValidationError);
  EXPECT_THROW(prediction_error(1, -0.1, ErrorKind::cross_entropy), ValidationError);
}

TEST(ScoreError, AgreesWithPredictionErrorAndDerivatives) {
  RngStream rng(1, 1);
  for (int i = 0; i < 60; ++i) {
    const double s = std::clamp(3 * rng.normal(), -6.0, 6.0), t = rng.uniform();
    EXPECT_NEAR(score_error(t, s, ErrorKind::cross_entropy), prediction_error(t, logistic(s), ErrorKind::cross_entropy),
                1e-10);
    EXPECT_NEAR(score_error(t, s, ErrorKind::probit_cross_entropy),
                s > 0 ? prediction_error(1 - t, std_normal_cdf(-s), ErrorKind::cross_entropy)
                      : prediction_error(t, std_normal_cdf(s), ErrorKind::cross_entropy),
                1e-9);
    for (ErrorKind k : {ErrorKind::cross_entropy, ErrorKind::probit_cross_entropy, ErrorKind::squared}) {
      double ds = 0, dt = 0;
      score_error(t, s, k, &ds, &dt);
      const double h = 1e-6;
      const double fs = (score_error(t, s + h, k) - score_error(t, s - h, k)) / (2 * h);
      const double ft = (score_error(t + h, s, k) - score_error(t - h, s, k)) / (2 * h);
      EXPECT_LE(rel_err(ds, fs), 1e-5);
      EXPECT_LE(rel_err(dt, ft), 1e-5);
      const double ps = (pseudo_label(s + h, k) - pseudo_label(s - h, k)) / (2 * h);
      EXPECT_LE(rel_err(pseudo_label_slope(s, k), ps), 1e-5);
    }
  }
  EXPECT_TRUE(std::isfinite(score_error(1.0, -40.0, ErrorKind::probit_cross_entropy)));
}

TEST(Estimators, NaiveIpsDrEib) {
  EXPECT_EQ(naive_estimate(std::vector<double>(5, 0.7)), 0.7);
  EXPECT_NEAR(naive_estimate(std::vector<double>{std::log(2.0), 0.0}), std::log(2.0) / 2, 1e-16);
  const std::vector<double> ten = {0.1, 0.4, 0.2, 0.9, 1.3, 0.0, 0.5, 0.6, 0.3, 0.8};
  EXPECT_NEAR(naive_estimate(ten), 5.1 / 10, 1e-15);
  EXPECT_THROW(naive_estimate(std::vector<double>{}), ValidationError);

  EXPECT_EQ(ips_estimate(std::vector<double>{2.0}, std::vector<std::uint8_t>{1}, std::vector<double>{0.5}), 4.0);
  const std::vector<std::uint8_t> all(10, 1);
  EXPECT_NEAR(ips_estimate(ten, all, std::vector<double>(10, 1.0)), naive_estimate(ten), 1e-15);

  const std::vector<std::uint8_t> mixed = {1, 0, 0, 1, 1, 0, 1, 0, 1, 0};
  const std::vector<double> p = {0.2, 0.3, 0.9, 0.5, 0.7, 0.1, 0.6, 0.4, 0.8, 0.25};
  const std::vector<double> imp = {0.3, 0.1, 0.7, 0.2, 0.2, 0.9, 0.4, 0.4, 0.1, 0.6};
  double ideal = 0;
  for (double e : ten) ideal += e / 10;
  EXPECT_NEAR(dr_estimate(ten, ten, mixed, p), ideal, 1e-15);
  const std::vector<std::uint8_t> none(10, 0);
  double mean_imp = 0;
  for (double e : imp) mean_imp += e / 10;
  EXPECT_NEAR(dr_estimate(ten, imp, none, p), mean_imp, 1e-15);
  EXPECT_NEAR(eib_estimate(ten, imp, all), naive_estimate(ten), 1e-15);
  EXPECT_NEAR(eib_estimate(ten, imp, none), mean_imp, 1e-15);
  // 6-pair hand blend: observed errors where o = 1, imputed elsewhere.
  const std::vector<double> e6 = {1, 2, 3, 4, 5, 6}, i6 = {10, 20, 30, 40, 50, 60};
  const std::vector<std::uint8_t> o6 = {1, 0, 1, 0, 0, 1};
  EXPECT_NEAR(eib_estimate(e6, i6, o6), (1 + 20 + 3 + 40 + 50 + 6) / 6.0, 1e-14);
}

TEST(ModelLosses, NaiveMatchesMeanError) {
  const auto s = samples(10, 1.0, true, 2);
  const auto m = linear(0.7, -0.2);
  double ref = 0;
  for (const auto& p : s) ref += prediction_error(p.label, logistic(m.score(ScalarFeature{p.x})), ErrorKind::cross_entropy);
  EXPECT_NEAR(naive_loss(s, m, ErrorKind::cross_entropy, nullptr), ref / 10, 1e-12);
  EXPECT_THROW(naive_loss({}, m, ErrorKind::cross_entropy, nullptr), ValidationError);
}

TEST(ModelLosses, IpsDrEibReductions) {
  auto s = samples(40, 1.0, false, 3);
  const auto m = linear(1.2, 0.1);
  const ErrorKind k = ErrorKind::squared;
  PropensityEstimate ones{std::vector<double>(s.size(), 1.0), 0.05};
  EXPECT_NEAR(ips_loss(s, m, ones, k, nullptr), naive_loss(s, m, k, nullptr), 1e-12);
  // Uniform propensity |O|/|D| on the full slice gives the naive loss.
  auto mixed = samples(40, 0.4, false, 4);
  std::vector<PairSample> obs;
  for (const auto& p : mixed) {
    if (p.observed) obs.push_back(p);
  }
  PropensityEstimate uniform{std::vector<double>(mixed.size(), double(obs.size()) / mixed.size()), 0.05};
  EXPECT_NEAR(ips_loss(mixed, m, uniform, k, nullptr), naive_loss(obs, m, k, nullptr), 1e-12);

  // An imputation model whose pseudo-label equals the prediction imputes
  // zero error; EIB with everything observed is the naive loss.
  ImputationModel same{m};
  EXPECT_NEAR(eib_loss(s, m, same, k, nullptr), naive_loss(s, m, k, nullptr), 1e-12);
  for (auto& p : mixed) p.observed = false;
  PropensityEstimate half{std::vector<double>(mixed.size(), 0.5), 0.05};
  ImputationModel other{linear(-0.3, 0.4)};
  double mean_imp = 0;
  for (const auto& p : mixed) {
    const double t = other.model.score(ScalarFeature{p.x});
    mean_imp += (t - m.score(ScalarFeature{p.x})) * (t - m.score(ScalarFeature{p.x})) / mixed.size();
  }
  EXPECT_NEAR(dr_loss(mixed, m, other, half, k, nullptr), mean_imp, 1e-12);
  EXPECT_NEAR(eib_loss(mixed, m, other, k, nullptr), mean_imp, 1e-12);
}

TEST(ModelLosses, GradientsMatchFiniteDifferences) {
  const auto s = samples(25, 0.5, true, 5);
  auto m = ScoreModel::scalar_mlp({4});
  RngStream rng(6, 6);
  m.init(rng, 0.8);
  ImputationModel imp{linear(0.5, -0.1)};
  std::vector<double> pv(s.size());
  for (auto& v : pv) v = 0.1 + 0.8 * rng.uniform();
  const PropensityEstimate props{pv, 0.05};
  const std::vector<std::function<double(GradBuffer*)>> losses = {
      [&](GradBuffer* g) { return ips_loss(s, m, props, ErrorKind::cross_entropy, g); },
      [&](GradBuffer* g) { return dr_loss(s, m, imp, props, ErrorKind::probit_cross_entropy, g); },
      [&](GradBuffer* g) { return eib_loss(s, m, imp, ErrorKind::cross_entropy, g); },
  };
  for (const auto& loss : losses) {
    GradBuffer g = m.make_grad();
    loss(&g);
    auto p = m.params();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double saved = p[j], h = 1e-6;
      p[j] = saved + h;
      const double up = loss(nullptr);
      p[j] = saved - h;
      const double dn = loss(nullptr);
      p[j] = saved;
      EXPECT_LE(rel_err(g.params[j], (up - dn) / (2 * h)), 1e-5);
    }
  }
}

TEST(Imputation, GradientSignAndConvergence) {
  PairSample one;
  one.x = 1.0;
  one.observed = true;
  one.label = 0.5;
  const PropensityEstimate p1{{0.5}, 0.05};
  ImputationModel imp{linear(0.0, 2.0)};  // pseudo-label 2 > 0.5
  GradBuffer g = imp.model.make_grad();
  update_imputation({&one, 1}, imp, p1, ErrorKind::squared, g);
  EXPECT_GT(g.params[1], 0.0);

  ImputationModel exact{linear(0.0, 0.5)};
  GradBuffer g0 = exact.model.make_grad();
  update_imputation({&one, 1}, exact, p1, ErrorKind::squared, g0);
  EXPECT_NEAR(g0.params[0], 0.0, 1e-15);
  EXPECT_NEAR(g0.params[1], 0.0, 1e-15);

  auto s = samples(20, 1.0, false, 7);
  for (auto& p : s) p.label = 1.5 * p.x - 0.3 + 0.1 * p.label;
  PropensityEstimate props{std::vector<double>(s.size(), 0.4), 0.05};
  ImputationModel fit{linear(0.0, 0.0)};
  double prev = 1e300;
  for (int step = 0; step < 100; ++step) {
    GradBuffer gb = fit.model.make_grad();
    const double loss = update_imputation(s, fit, props, ErrorKind::squared, gb);
    ASSERT_LE(loss, prev + 1e-12) << step;
    prev = loss;
    for (std::size_t j = 0; j < gb.params.size(); ++j) fit.model.params()[j] -= 0.01 * gb.params[j];
  }
}

TEST(Propensity, SelectionHeadClipping) {
  std::vector<PairSample> s(3);
  s[0].x = 0.0;
  s[1].x = -10.0;
  s[2].x = 1.0;
  const auto p = propensity_from_selection_head(linear(1.0, 0.0), s, 0.05);
  EXPECT_EQ(p.p_hat[0], 0.5);
  EXPECT_EQ(p.p_hat[1], 0.05);
  EXPECT_NEAR(p.p_hat[2], 0.8413447460685429, 1e-15);
  const auto q = propensity_logistic(linear(1.0, 0.0), s, 0.05);
  EXPECT_EQ(q.p_hat[0], 0.5);
  EXPECT_EQ(q.p_hat[1], 0.05);
}

TEST(Propensity, BceFitsObservationRate) {
  auto s = samples(400, 0.3, false, 8);
  auto m = linear(0.0, 0.0);
  for (int step = 0; step < 2000; ++step) {
    GradBuffer g = m.make_grad();
    propensity_bce(s, m, &g);
    for (std::size_t j = 0; j < 2; ++j) m.params()[j] -= 0.5 * g.params[j];
  }
  double rate = 0;
  for (const auto& p : s) rate += p.observed;
  rate /= s.size();
  EXPECT_NEAR(logistic(m.params()[1]), rate, 0.05);
}
