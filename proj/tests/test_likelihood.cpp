#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "exoc/error.hpp"
#include "exoc/likelihood.hpp"
#include "exoc/numkernel.hpp"

using namespace exoc;

namespace {

std::vector<double> draws(std::size_t n, std::uint64_t seed) {
  RngStream r(seed, 77);
  std::vector<double> v(n);
  r.fill_normal(v);
  return v;
}

double rel_err(double a, double b) { return std::fabs(a - b) / std::max(1.0, std::fabs(b)); }

// Central difference of f at x.
double fd(const std::function<double(double)>& f, double x, double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

// Density of (z, y) with means (g_o, g_r), unit variances, correlation rho.
double joint_pdf(double z, double y, double g_o, double g_r, double rho) {
  const double a = z - g_o, b = y - g_r, det = 1 - rho * rho;
  return std::exp(-(a * a - 2 * rho * a * b + b * b) / (2 * det)) / (2 * std::numbers::pi * std::sqrt(det));
}

double phi_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

bool near_indicator_edge(const std::vector<double>& eps, double thr, double h) {
  for (double e : eps) {
    if (std::fabs(e - thr) < 10 * h) return true;
  }
  return false;
}

}  // namespace

TEST(ContObs, CollapsedCase) {
  const auto t = cont_obs_term(0.7, 0.0, 0.7, 0.0);
  EXPECT_NEAR(t.value, -kLogSqrt2Pi + std::log(0.5), 1e-15);
}

TEST(ContObs, RhoZeroDecouples) {
  const double g_o = 0.8;
  const auto t = cont_obs_term(1.0, g_o, 0.2, 0.0);
  EXPECT_NEAR(t.d_go, std_normal_pdf(g_o) / std_normal_cdf(g_o), 1e-14);
  const double f = fd([&](double g) { return cont_obs_term(1.0, g, 0.2, 0.0).value; }, g_o);
  EXPECT_LE(rel_err(t.d_go, f), 1e-7);
}

TEST(ContObs, MatchesQuadratureOfJointDensity) {
  RngStream rng(2, 2);
  for (int i = 0; i < 20; ++i) {
    const double y = 2 * rng.normal(), g_o = rng.normal(), g_r = rng.normal();
    for (double rho : {0.6, -0.6, 0.0}) {
      const double hi = std::max(0.0, g_o) + 14.0;
      double peak = 0.0;
      for (int j = 0; j <= 1000; ++j) peak = std::max(peak, joint_pdf(hi * j / 1000.0, y, g_o, g_r, rho));
      const double q = integrate_adaptive_simpson(
          [&](double z) { return joint_pdf(z, y, g_o, g_r, rho); }, 0.0, hi, {1e-12 * peak, 60, 4'000'000});
      const double v = cont_obs_term(y, g_o, g_r, rho).value;
      EXPECT_NEAR(v, std::log(q), 1e-6) << y << " " << g_o << " " << g_r << " " << rho;
      EXPECT_LE(std::fabs(std::exp(v) / q - 1.0), 1e-6);
    }
  }
}

TEST(ContMis, ValuesAndStability) {
  EXPECT_NEAR(cont_mis_term(0.0).value, std::log(0.5), 1e-15);
  const auto far = cont_mis_term(20.0);
  EXPECT_TRUE(std::isfinite(far.value));
  EXPECT_NEAR(far.value, -200.0 - std::log(20.0) - kLogSqrt2Pi, 0.01);
  const auto t = cont_mis_term(1.3);
  EXPECT_NEAR(t.d_go, -std_normal_pdf(1.3) / std_normal_cdf(-1.3), 1e-14);
  EXPECT_LE(rel_err(t.d_go, fd([](double g) { return cont_mis_term(g).value; }, 1.3)), 1e-6);
  EXPECT_EQ(t.d_gr, 0.0);
  EXPECT_EQ(t.d_rho, 0.0);
}

TEST(McJoint, IndicatorNeverFires) {
  const auto eps = draws(1000, 1);
  EXPECT_EQ(mc_joint_pos_r(-30.0, 0.5, 0.3, eps).value, 0.0);
  EXPECT_EQ(mc_joint_pos_o(0.5, -30.0, 0.3, eps).value, 0.0);
}

TEST(McJoint, OrthantValues) {
  MCConfig cfg;
  cfg.samples = 200000;
  const auto r = mc_joint_pos_r(0, 0, 0.5, cfg, RngStream(1, 1));
  EXPECT_NEAR(r.value, 1.0 / 3.0, 0.005);
  const auto o = mc_joint_pos_o(0, 0, -0.5, cfg, RngStream(2, 2));
  EXPECT_NEAR(o.value, 1.0 / 6.0, 0.005);
}

TEST(McJoint, IndependenceFactorises) {
  MCConfig cfg;
  cfg.samples = 100000;
  const auto est = mc_joint_pos_r(0.3, -0.4, 0.0, cfg, RngStream(3, 3));
  // Each summand lies in [0, 1]; its variance is bounded by p(1 - p).
  const double p = phi_cdf(0.3) * phi_cdf(-0.4);
  EXPECT_NEAR(est.value, p, 3 * std::sqrt(p * (1 - p) / 1e5));
}

TEST(McJoint, SymmetricInputsAgreeExactly) {
  const auto eps = draws(500, 4);
  for (double a : {-0.7, 0.0, 1.1}) {
    EXPECT_EQ(mc_joint_pos_r(a, a, 0.35, eps).value, mc_joint_pos_o(a, a, 0.35, eps).value);
  }
}

TEST(McJoint, SameStreamIsDeterministic) {
  MCConfig cfg;
  cfg.samples = 64;
  cfg.seed = 9;
  const auto a = mc_joint_pos_r(0.2, 0.1, 0.4, cfg, pair_stream(cfg, 3, 77));
  const auto b = mc_joint_pos_r(0.2, 0.1, 0.4, cfg, pair_stream(cfg, 3, 77));
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.d_rho, b.d_rho);
  const auto c = mc_joint_pos_r(0.2, 0.1, 0.4, cfg, pair_stream(cfg, 4, 77));
  EXPECT_NE(a.value, c.value);
}

TEST(McJoint, UnbiasedAgainstQuadrature) {
  const double g_o = 0.4, g_r = -0.3, rho = 0.55;
  MCConfig cfg;
  cfg.samples = 1000;
  double sum = 0, sq = 0;
  for (int s = 0; s < 200; ++s) {
    const double v = mc_joint_pos_r(g_o, g_r, rho, cfg, RngStream(100 + s, 5)).value;
    sum += v;
    sq += v * v;
  }
  const double mean = sum / 200, var = sq / 200 - mean * mean;
  EXPECT_LE(std::fabs(mean - orthant_prob_quadrature(g_o, g_r, rho)), 4 * std::sqrt(var / 200));
}

TEST(BinaryTerms, Definitions) {
  MCConfig cfg;
  cfg.samples = 200000;
  // r = 1 term is log MC^r on the same draws.
  const auto eps = draws(2000, 6);
  const auto mc = mc_joint_pos_r(0.1, 0.3, 0.2, eps);
  EXPECT_NEAR(binary_term_R(true, true, 0.1, 0.3, 0.2, cfg, eps).value, std::log(mc.value), 1e-15);
  EXPECT_NEAR(binary_term_R(true, false, 0.0, 0.0, 0.0, cfg, RngStream(7, 7)).value, std::log(0.25), 0.01);
  EXPECT_THROW(binary_term_R(false, true, 0.0, 0.0, 0.0, cfg, eps), ValidationError);
}

TEST(BinaryTerms, ClampKeepsLossFinite) {
  MCConfig cfg;
  const std::vector<double> eps(16, 5.0);
  const auto t = binary_term_R(true, false, -3.0, 5.0, 0.0, cfg, eps);
  EXPECT_NEAR(t.value, std::log(cfg.floor_eps), 1e-12);
  EXPECT_TRUE(std::isfinite(t.d_gr));
}

TEST(BinaryTerms, SelectionPhase) {
  MCConfig cfg;
  cfg.samples = 200000;
  const auto eps = draws(300, 8);
  EXPECT_NEAR(binary_term_D(false, false, 0.0, 0.3, 0.2, cfg, eps).value, std::log(0.5), 1e-15);
  EXPECT_EQ(binary_term_D(true, true, 0.4, 0.4, 0.3, cfg, eps).value,
            binary_term_R(true, true, 0.4, 0.4, 0.3, cfg, eps).value);
  const double ref = std::log(std_normal_cdf(0.5) - orthant_prob_quadrature(0.5, 0.2, 0.4));
  const double v = binary_term_D(true, false, 0.5, 0.2, 0.4, cfg, RngStream(9, 9)).value;
  EXPECT_NEAR(v, ref, 0.01);
  EXPECT_EQ(binary_term_D(true, false, 0.5, 0.2, 0.4, cfg, eps).d_gr, 0.0);
}

TEST(Gradients, ContinuousTerms) {
  RngStream rng(10, 10);
  for (int i = 0; i < 60; ++i) {
    const double y = 2 * rng.normal(), g_o = 1.5 * rng.normal(), g_r = rng.normal();
    const double rho = 1.9 * rng.uniform() - 0.95;
    const auto t = cont_obs_term(y, g_o, g_r, rho);
    EXPECT_LE(rel_err(t.d_go, fd([&](double v) { return cont_obs_term(y, v, g_r, rho).value; }, g_o)), 1e-5);
    EXPECT_LE(rel_err(t.d_gr, fd([&](double v) { return cont_obs_term(y, g_o, v, rho).value; }, g_r)), 1e-5);
    EXPECT_LE(rel_err(t.d_rho, fd([&](double v) { return cont_obs_term(y, g_o, g_r, v).value; }, rho)), 1e-5);
    const auto m = cont_mis_term(g_o);
    EXPECT_LE(rel_err(m.d_go, fd([&](double v) { return cont_mis_term(v).value; }, g_o)), 1e-5);
  }
}

TEST(Gradients, MonteCarloTermsOnFrozenSamples) {
  RngStream rng(11, 11);
  MCConfig cfg;
  const double h = 1e-6;
  int checked = 0;
  for (int i = 0; checked < 60 && i < 1000; ++i) {
    const double g_o = rng.normal(), g_r = rng.normal(), rho = 1.8 * rng.uniform() - 0.9;
    const auto eps = draws(64, 1000 + i);
    // Only differentiate away from the indicator boundaries.
    if (near_indicator_edge(eps, -g_o, h) || near_indicator_edge(eps, -g_r, h)) continue;
    ++checked;
    const auto mr = mc_joint_pos_r(g_o, g_r, rho, eps);
    EXPECT_LE(rel_err(mr.d_score, fd([&](double v) { return mc_joint_pos_r(g_o, v, rho, eps).value; }, g_r, h)), 1e-5);
    EXPECT_LE(rel_err(mr.d_rho, fd([&](double v) { return mc_joint_pos_r(g_o, g_r, v, eps).value; }, rho, h)), 1e-5);
    const auto mo = mc_joint_pos_o(g_o, g_r, rho, eps);
    EXPECT_LE(rel_err(mo.d_score, fd([&](double v) { return mc_joint_pos_o(v, g_r, rho, eps).value; }, g_o, h)), 1e-5);
    EXPECT_LE(rel_err(mo.d_rho, fd([&](double v) { return mc_joint_pos_o(g_o, g_r, v, eps).value; }, rho, h)), 1e-5);
    for (bool r : {false, true}) {
      const auto tr = binary_term_R(true, r, g_o, g_r, rho, cfg, eps);
      EXPECT_LE(rel_err(tr.d_gr, fd([&](double v) { return binary_term_R(true, r, g_o, v, rho, cfg, eps).value; }, g_r, h)), 1e-5);
      EXPECT_LE(rel_err(tr.d_rho, fd([&](double v) { return binary_term_R(true, r, g_o, g_r, v, cfg, eps).value; }, rho, h)), 1e-5);
      EXPECT_LE(rel_err(tr.d_go, fd([&](double v) { return binary_term_R(true, r, v, g_r, rho, cfg, eps).value; }, g_o, h)), 1e-5);
      const auto td = binary_term_D(true, r, g_o, g_r, rho, cfg, eps);
      EXPECT_LE(rel_err(td.d_go, fd([&](double v) { return binary_term_D(true, r, v, g_r, rho, cfg, eps).value; }, g_o, h)), 1e-5);
      EXPECT_LE(rel_err(td.d_rho, fd([&](double v) { return binary_term_D(true, r, g_o, g_r, v, cfg, eps).value; }, rho, h)), 1e-5);
    }
    const auto t0 = binary_term_D(false, false, g_o, g_r, rho, cfg, eps);
    EXPECT_LE(rel_err(t0.d_go, fd([&](double v) { return binary_term_D(false, false, v, g_r, rho, cfg, eps).value; }, g_o, h)), 1e-5);
  }
  EXPECT_EQ(checked, 60);
}

namespace {

std::vector<PairSample> toy_pairs(std::size_t n, bool continuous, std::uint64_t seed) {
  RngStream rng(seed, 1);
  std::vector<PairSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    PairSample s;
    s.pair = {static_cast<std::uint32_t>(rng.below(4)), static_cast<std::uint32_t>(rng.below(5))};
    s.x = rng.normal();
    s.observed = rng.uniform() < 0.6;
    s.label = continuous ? 2 * rng.normal() : (rng.uniform() < 0.5 ? 1.0 : 0.0);
    s.key = 1000 + i;
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST(BatchLoglik, EmptyAndSingleton) {
  auto o = ScoreModel::matrix_factorization(4, 5, 2);
  auto r = ScoreModel::matrix_factorization(4, 5, 2);
  RngStream rng(1, 2);
  o.init(rng);
  r.init(rng);
  const CorrelationParam c = CorrelationParam::from_value(0.3);
  MCConfig cfg;
  JointGrads g(o, r);
  EXPECT_EQ(batch_loglik({}, LabelKind::continuous, o, r, c, LikelihoodMode::continuous, cfg, 0, &g), 0.0);
  for (double v : g.o.params) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g.rho_raw, 0.0);

  PairSample s;
  s.pair = {1, 2};
  s.observed = true;
  s.label = 0.9;
  const double go = o.score(s.pair), gr = r.score(s.pair);
  EXPECT_DOUBLE_EQ(batch_loglik({&s, 1}, LabelKind::continuous, o, r, c, LikelihoodMode::continuous, cfg, 0, nullptr),
                   cont_obs_term(0.9, go, gr, c.value()).value);
}

TEST(BatchLoglik, BinarySelectionSumsTerms) {
  auto o = ScoreModel::matrix_factorization(4, 5, 2);
  auto r = ScoreModel::matrix_factorization(4, 5, 2);
  RngStream rng(3, 4);
  o.init(rng, 0.5);
  r.init(rng, 0.5);
  const CorrelationParam c = CorrelationParam::from_value(-0.4);
  MCConfig cfg;
  cfg.seed = 5;
  const auto pairs = toy_pairs(20, false, 6);
  double ref = 0;
  for (const auto& s : pairs) {
    ref += binary_term_D(s.observed, s.label > 0.5, o.score(s.pair), r.score(s.pair), c.value(), cfg,
                         pair_stream(cfg, 2, s.key))
               .value;
  }
  EXPECT_NEAR(batch_loglik(pairs, LabelKind::binary, o, r, c, LikelihoodMode::binary_d, cfg, 2, nullptr), ref,
              1e-12 * std::fabs(ref));
}

TEST(BatchLoglik, RejectsLabelMismatch) {
  const auto o = ScoreModel::matrix_factorization(4, 5, 2);
  const auto pairs = toy_pairs(3, false, 1);
  EXPECT_THROW(batch_loglik(pairs, LabelKind::binary, o, o, {}, LikelihoodMode::continuous, {}, 0, nullptr),
               ValidationError);
}

// Backprop through batch_loglik into every parameter, against finite
// differences of the total on the same per-pair streams.
TEST(BatchLoglik, ParameterGradientsMatchFiniteDifferences) {
  MCConfig cfg;
  cfg.seed = 3;
  cfg.samples = 32;
  struct Case {
    LabelKind labels;
    LikelihoodMode mode;
  };
  for (const Case k : {Case{LabelKind::continuous, LikelihoodMode::continuous},
                       Case{LabelKind::binary, LikelihoodMode::binary_r},
                       Case{LabelKind::binary, LikelihoodMode::binary_d}}) {
    auto o = ScoreModel::scalar_mlp({4});
    auto r = ScoreModel::matrix_factorization(4, 5, 2);
    RngStream rng(8, 8);
    o.init(rng, 0.6);
    r.init(rng, 0.6);
    CorrelationParam c{0.3};
    auto pairs = toy_pairs(12, k.labels == LabelKind::continuous, 12);
    if (k.mode == LikelihoodMode::binary_r) {
      for (auto& s : pairs) s.observed = true;
    }
    JointGrads g(o, r);
    auto total = [&] { return batch_loglik(pairs, k.labels, o, r, c, k.mode, cfg, 1, nullptr); };
    batch_loglik(pairs, k.labels, o, r, c, k.mode, cfg, 1, &g);
    const double h = 1e-6;
    auto check = [&](std::span<double> p, const std::vector<double>& an, bool frozen) {
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double saved = p[j];
        p[j] = saved + h;
        const double up = total();
        p[j] = saved - h;
        const double dn = total();
        p[j] = saved;
        const double num = (up - dn) / (2 * h);
        if (frozen) {
          EXPECT_EQ(an[j], 0.0);
        } else {
          EXPECT_LE(rel_err(an[j], num), 1e-5) << "param " << j;
        }
      }
    };
    // Phase R freezes the selection head, phase D the prediction head.
    check(o.params(), g.o.params, k.mode == LikelihoodMode::binary_r);
    check(r.params(), g.r.params, k.mode == LikelihoodMode::binary_d);
    const double saved = c.raw;
    c.raw = saved + h;
    const double up = total();
    c.raw = saved - h;
    const double dn = total();
    c.raw = saved;
    EXPECT_LE(rel_err(g.rho_raw, (up - dn) / (2 * h)), 1e-5);
    EXPECT_NE(g.rho_raw, 0.0);
  }
}

TEST(MCConfig, Validation) {
  MCConfig c;
  c.samples = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c.samples = 4;
  c.floor_eps = 1e-2;
  EXPECT_THROW(c.validate(), ValidationError);
}
