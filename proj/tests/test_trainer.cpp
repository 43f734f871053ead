#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "exoc/baselines.hpp"
#include "exoc/datagen.hpp"
#include "exoc/error.hpp"
#include "exoc/likelihood.hpp"
#include "exoc/trainer.hpp"

using namespace exoc;

namespace {

TrainTestSplit make_data(std::size_t m, std::size_t n, double rho, LabelKind kind, std::uint64_t seed,
                         double sparsity = 0.2, double sel_scale = 5.0) {
  SynthSpec s;
  s.users = m;
  s.items = n;
  s.rho = rho;
  s.target_sparsity = sparsity;
  s.label_mode = kind;
  s.seed = seed;
  s.selection_scale = sel_scale;
  return split_test(generate(s), 0.2, seed + 1);
}

std::vector<PairSample> first_observed(const InteractionDataset& d, std::size_t n) {
  std::vector<PairSample> out;
  for (std::size_t i = 0; i < n && i < d.observed().size(); ++i) out.push_back(d.observed_sample(i));
  return out;
}

std::vector<PairSample> some_unobserved(const InteractionDataset& d, std::size_t n) {
  std::vector<PairSample> out;
  for (std::uint64_t p = 0; p < d.num_pairs() && out.size() < n; p += 7) {
    const auto s = d.sample(p);
    if (!s.observed) out.push_back(s);
  }
  return out;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<double> p = {1.0, -2.0}, g = {0.0, 0.0};
  AdamState st(2);
  adam_step(p, g, st, 0.1, 0.0);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
}

TEST(Adam, FirstStepIsLrTimesSign) {
  std::vector<double> p = {0.0, 0.0, 0.0}, g = {3.0, -0.01, 1e4};
  AdamState st(3);
  adam_step(p, g, st, 0.05, 0.0);
  EXPECT_NEAR(p[0], -0.05, 1e-9);
  EXPECT_NEAR(p[1], 0.05, 1e-6);
  EXPECT_NEAR(p[2], -0.05, 1e-9);
}

TEST(Adam, ConvergesOnQuadratic) {
  std::vector<double> w = {0.0}, g(1);
  AdamState st(1);
  for (int i = 0; i < 100; ++i) {
    g[0] = 2 * (w[0] - 3);
    adam_step(w, g, st, 0.3, 0.0);
  }
  EXPECT_NEAR(w[0], 3.0, 1e-2);
}

TEST(Adam, ShapeMismatch) {
  std::vector<double> p(2), g(3);
  AdamState st(2);
  EXPECT_THROW(adam_step(p, g, st, 0.1, 0.0), ShapeError);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(), ValidationError);
  c = TrainConfig{};
  c.batch_r = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = TrainConfig{};
  c.rho_grid = {0.2, 1.0};
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(parse_method("sgd"), ValidationError);
  EXPECT_EQ(parse_method("ours-dr"), Method::ours_dr);
  EXPECT_STREQ(method_name(Method::ours_naive), "ours-naive");
}

TEST(Split, HoldoutIsDisjointAndStable) {
  const auto d = make_data(60, 60, 0.3, LabelKind::binary, 1);
  const auto a = make_training_split(d.train, 0.1, 5), b = make_training_split(d.train, 0.1, 5);
  EXPECT_EQ(a.train_observed, b.train_observed);
  EXPECT_EQ(a.train_observed.size() + a.val_observed.size(), d.train.observed().size());
  for (const auto& s : a.val_observed) EXPECT_TRUE(a.held_out(d.train.flat(s.pair)));
  for (const auto& s : a.val_unobserved) {
    EXPECT_FALSE(s.observed);
    EXPECT_TRUE(a.held_out(d.train.flat(s.pair)));
  }
  for (auto i : a.train_observed) {
    const auto& t = d.train.observed()[i];
    EXPECT_FALSE(a.held_out(d.train.flat({t.user, t.item})));
  }
  EXPECT_NEAR(double(a.val_observed.size()) / d.train.observed().size(), 0.1, 0.03);
  InteractionDataset empty(5, 5, LabelKind::binary);
  EXPECT_THROW(make_training_split(empty, 0.1, 1), ValidationError);
}

TEST(Objective, AlphaZeroReducesToBaselineGradient) {
  const auto d = make_data(40, 40, 0.5, LabelKind::binary, 2);
  for (Method method : {Method::ours_naive, Method::ours_dr}) {
    TrainConfig cfg;
    cfg.method = method;
    cfg.alpha = 0.0;
    cfg.mode = LabelKind::binary;
    Models models = make_models(d.train, cfg);
    const auto obs = first_observed(d.train, 32);
    const auto unobs = some_unobserved(d.train, 32);
    JointGrads g(models.model_o, models.model_r);
    const double w_obs = 0.2;
    phase_r_objective(models, cfg, debias_kind_of(method), obs, unobs, w_obs, 3, g);

    const auto props = propensity_from_selection_head(models.model_o, obs, cfg.clip_floor);
    GradBuffer ref = models.model_r.make_grad();
    debias_objective(debias_kind_of(method), obs, unobs, w_obs, 1 - w_obs, props.p_hat, models.model_r,
                     models.imputation ? &*models.imputation : nullptr, ErrorKind::probit_cross_entropy, &ref);
    EXPECT_EQ(g.r.params, ref.params) << method_name(method);
    EXPECT_EQ(g.rho_raw, 0.0);
  }
}

TEST(Objective, RhoGetsGradientInPhaseR) {
  const auto d = make_data(40, 40, 0.5, LabelKind::binary, 3);
  TrainConfig cfg;
  cfg.mode = LabelKind::binary;
  Models models = make_models(d.train, cfg);
  models.corr = CorrelationParam::from_value(0.3);
  JointGrads g(models.model_o, models.model_r);
  phase_r_objective(models, cfg, DebiasKind::naive, first_observed(d.train, 32), {}, 0.2, 1, g);
  EXPECT_NE(g.rho_raw, 0.0);
}

TEST(TrainBinary, PureLikelihoodLossDecreases) {
  const auto d = make_data(50, 50, 0.5, LabelKind::binary, 4, 0.5, 1.0);
  TrainConfig cfg;
  cfg.method = Method::ours_mle;
  cfg.alpha = 1.0;
  cfg.mode = LabelKind::binary;
  cfg.mc.samples = 2048;
  cfg.batch_r = cfg.batch_d = 4096;
  cfg.steps_r = cfg.steps_d = 1;
  cfg.set_lr(0.03);
  cfg.max_epochs = 10;
  cfg.patience = 100;
  const auto res = train(d.train, cfg);
  ASSERT_EQ(res.trace.epochs.size(), 10u);
  for (std::size_t e = 1; e < res.trace.epochs.size(); ++e) {
    EXPECT_LE(res.trace.epochs[e].neg_ll_r, res.trace.epochs[e - 1].neg_ll_r)
        << e << " " << res.trace.epochs[e].neg_ll_d << " " << res.trace.epochs[e].rho;
  }
  for (const auto& r : res.trace.epochs) EXPECT_LT(std::fabs(r.rho), 1.0);
}

TEST(TrainBinary, DeterministicTrace) {
  const auto d = make_data(40, 40, 0.5, LabelKind::binary, 5);
  TrainConfig cfg;
  cfg.method = Method::ours_dr;
  cfg.mode = LabelKind::binary;
  cfg.max_epochs = 4;
  const auto a = train(d.train, cfg), b = train(d.train, cfg);
  EXPECT_TRUE(a.trace.same_numbers(b.trace));
  EXPECT_EQ(a.models.model_r.params()[0], b.models.model_r.params()[0]);
  cfg.seed = 2;
  const auto c = train(d.train, cfg);
  EXPECT_FALSE(a.trace.same_numbers(c.trace));
}

TEST(TrainBinary, EarlyStoppingKeepsBestSnapshot) {
  const auto d = make_data(40, 40, 0.5, LabelKind::binary, 6);
  TrainConfig cfg;
  cfg.method = Method::naive;
  cfg.mode = LabelKind::binary;
  cfg.patience = 2;
  cfg.max_epochs = 200;
  const auto r = train(d.train, cfg);
  ASSERT_FALSE(r.trace.epochs.empty());
  EXPECT_EQ(r.trace.val_metric_name, "val_auc");
  double best = -1;
  std::size_t best_epoch = 0;
  for (const auto& e : r.trace.epochs) {
    if (e.val_metric > best) best = e.val_metric, best_epoch = e.epoch;
  }
  EXPECT_EQ(r.trace.best_epoch, best_epoch);
  EXPECT_EQ(r.trace.best_val, best);
  EXPECT_LE(r.trace.epochs.size(), best_epoch + cfg.patience);
}

TEST(TrainBinary, NonFiniteLossAborts) {
  const auto d = make_data(30, 30, 0.5, LabelKind::binary, 7);
  TrainConfig cfg;
  cfg.method = Method::ours_naive;
  cfg.mode = LabelKind::binary;
  cfg.set_lr(1e300);
  cfg.max_epochs = 5;
  try {
    train(d.train, cfg);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos) << e.what();
  }
}

TEST(TrainBinary, ModeConflictRejected) {
  const auto d = make_data(30, 30, 0.5, LabelKind::binary, 8);
  TrainConfig cfg;
  cfg.mode = LabelKind::continuous;
  EXPECT_THROW(train(d.train, cfg), ValidationError);
}

TEST(TrainContinuous, RecoversZeroRho) {
  const auto d = make_data(200, 200, 0.0, LabelKind::continuous, 9, 0.2);
  TrainConfig cfg;
  cfg.method = Method::ours_mle;
  cfg.mode = LabelKind::continuous;
  cfg.backbone = Backbone::feature;
  const auto r = train(d.train, cfg);
  EXPECT_LE(std::fabs(r.models.corr.value()), 0.1);
  EXPECT_EQ(r.trace.val_metric_name, "val_nll");
  EXPECT_EQ(r.trace.rho_profile.size(), cfg.rho_grid.size());
}

TEST(TrainContinuous, OracleInitialisationIsNearOptimum) {
  SynthSpec s;
  s.users = 150;
  s.items = 150;
  s.rho = 0.6;
  s.target_sparsity = 0.1;
  s.seed = 10;
  const auto gen = generate(s);
  const auto data = gen.training_view();
  TrainConfig cfg;
  cfg.method = Method::ours_mle;
  cfg.mode = LabelKind::continuous;
  cfg.backbone = Backbone::feature;
  cfg.mlp_hidden = {1};
  cfg.warm_start_epochs = 0;
  cfg.rho_grid.clear();
  cfg.set_lr(0.001);
  Models m = make_models(data, cfg);
  double xbar = 0;
  for (double x : gen.x) xbar += x / gen.x.size();
  // g_r = 5 x and g_o = 5 tanh(x - mean x) - beta exactly.
  m.model_r.params()[0] = 5.0;
  m.model_r.params()[1] = 0.0;
  const std::vector<double> o = {1.0, -xbar, 5.0, -gen.beta};
  std::copy(o.begin(), o.end(), m.model_o.params().begin());
  m.corr = CorrelationParam::from_value(0.6);

  std::vector<PairSample> all;
  for (std::uint64_t p = 0; p < data.num_pairs(); ++p) all.push_back(data.sample(p));
  auto nll = [&](const Models& mm) {
    return -batch_loglik(all, LabelKind::continuous, mm.model_o, mm.model_r, mm.corr, LikelihoodMode::continuous,
                         cfg.mc, 0, nullptr);
  };
  const double before = nll(m);
  const TrainingSplit split = make_training_split(data, cfg.val_fraction, cfg.seed);
  const auto r = train_continuous(split, m, cfg);
  const double after = nll(r.models);
  EXPECT_LE(std::fabs(before - after), 0.01 * std::fabs(after));
  EXPECT_NEAR(r.models.corr.value(), 0.6, 0.1);
}

TEST(TrainContinuous, GaussianPartDominatesForLargeSelectionScore) {
  const double g_r = 0.4, y = g_r;
  const auto t = cont_obs_term(y, 30.0, g_r, 0.5);
  EXPECT_NEAR(t.value, -kLogSqrt2Pi, 1e-12);
}

TEST(Baselines, AllMethodsTrainOnBinaryData) {
  const auto d = make_data(40, 40, 0.5, LabelKind::binary, 11, 0.2, 1.0);
  for (Method m : {Method::naive, Method::eib, Method::ips, Method::dr, Method::ours_naive, Method::ours_dr,
                   Method::ours_mle}) {
    TrainConfig cfg;
    cfg.method = m;
    cfg.mode = LabelKind::binary;
    cfg.max_epochs = 3;
    const auto r = train(d.train, cfg);
    const auto rep = evaluate(r.models, m, d.train, d.test, 5);
    EXPECT_TRUE(std::isfinite(rep.mse)) << method_name(m);
    EXPECT_GT(rep.auc, 0.5) << method_name(m);
  }
}

TEST(Evaluate, PerfectOracleGivesIdealRanking) {
  InteractionDataset d(3, 4, LabelKind::binary);
  d.set_observed(0, 0, 1.0);
  std::vector<Interaction> test;
  for (std::uint32_t u = 0; u < 3; ++u) {
    for (std::uint32_t i = 0; i < 4; ++i) test.push_back({u, i, (u + i) % 2 == 0 ? 1.0 : 0.0});
  }
  TrainConfig cfg;
  cfg.mode = LabelKind::binary;
  Models m = make_models(d, cfg);
  for (auto& p : m.model_r.params()) p = 0.0;
  // Item bias separates positives per user only through a per-pair score,
  // so set embeddings: user u has P = [1, -1] for even u, [-1, 1] otherwise;
  // item i has Q = [1, -1] for even i, [-1, 1] otherwise.
  const std::size_t k = m.model_r.dim();
  for (std::uint32_t u = 0; u < 3; ++u) {
    m.model_r.params()[u * k] = u % 2 == 0 ? 1.0 : -1.0;
  }
  for (std::uint32_t i = 0; i < 4; ++i) {
    m.model_r.params()[3 * k + i * k] = i % 2 == 0 ? 1.0 : -1.0;
  }
  const auto rep = evaluate(m, Method::naive, d, test, 5);
  EXPECT_NEAR(rep.ndcg_at_k, 1.0, 1e-15);
  EXPECT_EQ(rep.recall_at_k, 1.0);
  EXPECT_EQ(rep.auc, 1.0);
  EXPECT_THROW(evaluate(m, Method::naive, d, {}, 5), ValidationError);
}
