#include "exoc/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "exoc/error.hpp"
#include "exoc/numkernel.hpp"

namespace exoc {

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr, double weight_decay) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw ShapeError("adam: parameter, gradient and state sizes differ");
  }
  constexpr double b1 = 0.9;
  constexpr double b2 = 0.999;
  constexpr double eps = 1e-8;
  ++state.t;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i] + weight_decay * params[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

Method parse_method(const std::string& s) {
  if (s == "naive") return Method::naive;
  if (s == "eib") return Method::eib;
  if (s == "ips") return Method::ips;
  if (s == "dr") return Method::dr;
  if (s == "ours-naive") return Method::ours_naive;
  if (s == "ours-dr") return Method::ours_dr;
  if (s == "ours-mle") return Method::ours_mle;
  throw ValidationError("unknown method '" + s + "'");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::naive: return "naive";
    case Method::eib: return "eib";
    case Method::ips: return "ips";
    case Method::dr: return "dr";
    case Method::ours_naive: return "ours-naive";
    case Method::ours_dr: return "ours-dr";
    case Method::ours_mle: return "ours-mle";
  }
  return "?";
}

bool is_likelihood_method(Method m) {
  return m == Method::ours_naive || m == Method::ours_dr || m == Method::ours_mle;
}

DebiasKind debias_kind_of(Method m) {
  switch (m) {
    case Method::naive:
    case Method::ours_naive: return DebiasKind::naive;
    case Method::eib: return DebiasKind::eib;
    case Method::ips: return DebiasKind::ips;
    case Method::dr:
    case Method::ours_dr: return DebiasKind::dr;
    case Method::ours_mle: return DebiasKind::none;
  }
  return DebiasKind::none;
}

Backbone parse_backbone(const std::string& s) {
  if (s == "mf") return Backbone::mf;
  if (s == "feature") return Backbone::feature;
  throw ValidationError("unknown backbone '" + s + "'");
}

const char* backbone_name(Backbone b) { return b == Backbone::mf ? "mf" : "feature"; }

void TrainConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
  if (batch_r == 0 || batch_d == 0) throw ValidationError("batch sizes must be positive");
  for (double lr : {lr_r, lr_o, lr_rho, lr_imputation}) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("learning rates must be positive");
  }
  if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be non-negative");
  if (!(clip_floor > 0.0 && clip_floor < 1.0)) throw ValidationError("clip floor must lie in (0, 1)");
  if (!(val_fraction > 0.0 && val_fraction < 0.5)) {
    throw ValidationError("validation fraction must lie in (0, 0.5)");
  }
  if (max_epochs == 0) throw ValidationError("max epochs must be positive");
  if (patience == 0) throw ValidationError("patience must be positive");
  if (embed_dim == 0) throw ValidationError("embedding dimension must be positive");
  for (std::size_t h : mlp_hidden) {
    if (h == 0) throw ValidationError("hidden widths must be positive");
  }
  for (double r : rho_grid) {
    if (!(std::fabs(r) < 1.0)) throw ValidationError("rho grid values must satisfy |rho| < 1");
  }
  mc.validate();
}

void TrainConfig::set_lr(double lr) { lr_r = lr_o = lr_rho = lr_imputation = lr; }

void TrainTrace::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,loss_r,loss_d,blended,rho," << val_metric_name << ",seconds\n";
  for (const auto& e : epochs) {
    out << e.epoch << ',' << format_double(e.neg_ll_r) << ',' << format_double(e.neg_ll_d) << ','
        << format_double(e.blended) << ',' << format_double(e.rho) << ','
        << format_double(e.val_metric) << ',' << format_double(e.seconds) << '\n';
  }
}

bool TrainTrace::same_numbers(const TrainTrace& other) const {
  if (epochs.size() != other.epochs.size() || val_metric_name != other.val_metric_name ||
      best_epoch != other.best_epoch || best_val != other.best_val) {
    return false;
  }
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& a = epochs[i];
    const auto& b = other.epochs[i];
    if (a.epoch != b.epoch || a.neg_ll_r != b.neg_ll_r || a.neg_ll_d != b.neg_ll_d ||
        a.blended != b.blended || a.rho != b.rho || a.val_metric != b.val_metric) {
      return false;
    }
  }
  return true;
}

Models make_models(const InteractionDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  const bool needs_imputation =
      cfg.method == Method::eib || cfg.method == Method::dr || cfg.method == Method::ours_dr;
  auto build = [&](bool selection_head) {
    if (cfg.backbone == Backbone::mf) {
      return ScoreModel::matrix_factorization(data.users(), data.items(), cfg.embed_dim);
    }
    return selection_head ? ScoreModel::scalar_mlp(cfg.mlp_hidden) : ScoreModel::scalar_linear();
  };
  if (cfg.backbone == Backbone::feature && !data.has_features()) {
    throw ValidationError("the feature backbone needs a dataset with features");
  }
  const RngStream root(cfg.seed, 0x494E4954);
  Models models{build(true), build(false), CorrelationParam{}, std::nullopt};
  RngStream r0 = root.substream(0);
  RngStream r1 = root.substream(1);
  models.model_o.init(r0);
  models.model_r.init(r1);
  if (needs_imputation) {
    ImputationModel imp{build(false)};
    RngStream r2 = root.substream(2);
    imp.model.init(r2);
    models.imputation = std::move(imp);
  }
  return models;
}

bool TrainingSplit::held_out(std::uint64_t flat) const {
  const double u = static_cast<double>(mix_keys(holdout_key, flat) >> 11) * 0x1.0p-53;
  return u < val_fraction;
}

double TrainingSplit::train_observed_fraction() const {
  return n_train_pairs == 0 ? 0.0
                            : static_cast<double>(train_observed.size()) /
                                  static_cast<double>(n_train_pairs);
}

double TrainingSplit::val_observed_fraction() const {
  return n_val_pairs == 0 ? 0.0
                          : static_cast<double>(val_observed.size()) /
                                static_cast<double>(n_val_pairs);
}

TrainingSplit make_training_split(const InteractionDataset& data, double val_fraction,
                                  std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 0.5)) {
    throw ValidationError("validation fraction must lie in (0, 0.5)");
  }
  if (data.observed().empty()) throw ValidationError("training data has no observed pairs");
  TrainingSplit split;
  split.data = &data;
  split.val_fraction = val_fraction;
  split.holdout_key = mix_keys(seed, 0x56414C);
  const auto& obs = data.observed();
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (split.held_out(data.flat({obs[i].user, obs[i].item}))) {
      split.val_observed.push_back(data.observed_sample(i));
    } else {
      split.train_observed.push_back(i);
    }
  }
  if (split.train_observed.empty()) throw ValidationError("every observed pair was held out");
  std::uint64_t held = 0;
  for (std::uint64_t f = 0; f < data.num_pairs(); ++f) held += split.held_out(f) ? 1 : 0;
  split.n_val_pairs = held;
  split.n_train_pairs = data.num_pairs() - held;
  const std::uint64_t val_unobserved = held - split.val_observed.size();
  const std::size_t want =
      static_cast<std::size_t>(std::min<std::uint64_t>(val_unobserved, kMaxValUnobserved));
  RngStream rng(seed, 0x56414D);
  if (want == val_unobserved) {
    for (std::uint64_t f = 0; f < data.num_pairs(); ++f) {
      if (split.held_out(f) && !data.observed_index(f)) split.val_unobserved.push_back(data.sample(f));
    }
  } else {
    while (split.val_unobserved.size() < want) {
      const std::uint64_t f = rng.below(data.num_pairs());
      if (split.held_out(f) && !data.observed_index(f)) split.val_unobserved.push_back(data.sample(f));
    }
  }
  return split;
}

namespace {

// Draws training batches: a per-epoch permutation of the observed training
// pairs plus uniform draws of observed or unobserved training pairs.
class Sampler {
 public:
  Sampler(const TrainingSplit& split, std::uint64_t seed) : split_(split), seed_(seed), rng_(seed, 0) {
    order_ = split.train_observed;
    unobserved_ = split.n_train_pairs - split.train_observed.size();
  }

  void start_epoch(std::uint64_t epoch) {
    rng_ = RngStream(seed_, mix_keys(0x42415443, epoch));
    order_ = split_.train_observed;
    shuffle();
  }

  std::vector<PairSample> next_observed(std::size_t b) {
    std::vector<PairSample> out;
    out.reserve(b);
    while (out.size() < b) {
      if (pos_ == order_.size()) shuffle();
      out.push_back(split_.data->observed_sample(order_[pos_++]));
    }
    return out;
  }

  std::vector<PairSample> random_observed(std::size_t b) {
    std::vector<PairSample> out;
    out.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
      out.push_back(split_.data->observed_sample(order_[rng_.below(order_.size())]));
    }
    return out;
  }

  std::vector<PairSample> random_unobserved(std::size_t b) {
    std::vector<PairSample> out;
    if (unobserved_ == 0) return out;
    out.reserve(b);
    const InteractionDataset& data = *split_.data;
    std::uint64_t attempts = 0;
    const std::uint64_t budget = 10000 + 1000 * static_cast<std::uint64_t>(b);
    while (out.size() < b) {
      if (++attempts > budget) throw NumericError("could not sample unobserved training pairs");
      const std::uint64_t f = rng_.below(data.num_pairs());
      if (split_.held_out(f) || data.observed_index(f)) continue;
      out.push_back(data.sample(f));
    }
    return out;
  }

  bool has_unobserved() const { return unobserved_ > 0; }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[rng_.below(i)]);
    }
    pos_ = 0;
  }

  const TrainingSplit& split_;
  std::uint64_t seed_;
  RngStream rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::uint64_t unobserved_ = 0;
};

struct Optimizers {
  AdamState o;
  AdamState r;
  AdamState rho{1};
  AdamState imput;

  explicit Optimizers(const Models& m)
      : o(m.model_o.num_params()),
        r(m.model_r.num_params()),
        imput(m.imputation ? m.imputation->model.num_params() : 0) {}
};

void step_rho(Models& m, double grad, Optimizers& opt, const TrainConfig& cfg) {
  double g[1] = {grad};
  double p[1] = {m.corr.raw};
  adam_step(p, g, opt.rho, cfg.lr_rho, 0.0);
  m.corr.raw = p[0];
}

void require_finite(double v, const char* what, std::size_t epoch) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("non-finite ") + what + " at epoch " + std::to_string(epoch));
  }
}

ErrorKind error_kind(const TrainConfig& cfg) {
  if (cfg.mode == LabelKind::continuous) return ErrorKind::squared;
  return is_likelihood_method(cfg.method) ? ErrorKind::probit_cross_entropy
                                          : ErrorKind::cross_entropy;
}

PropensityEstimate propensities(const Models& m, const TrainConfig& cfg,
                                std::span<const PairSample> obs) {
  return is_likelihood_method(cfg.method)
             ? propensity_from_selection_head(m.model_o, obs, cfg.clip_floor)
             : propensity_logistic(m.model_o, obs, cfg.clip_floor);
}

// Refits the imputation model on one observed batch. EIB fits unweighted.
void imputation_step(Models& m, const TrainConfig& cfg, DebiasKind kind,
                     std::span<const PairSample> obs, const PropensityEstimate& props,
                     Optimizers& opt) {
  if (!m.imputation || (kind != DebiasKind::dr && kind != DebiasKind::eib)) return;
  PropensityEstimate used = props;
  if (kind == DebiasKind::eib) std::fill(used.p_hat.begin(), used.p_hat.end(), 1.0);
  GradBuffer g = m.imputation->model.make_grad();
  update_imputation(obs, *m.imputation, used, error_kind(cfg), g);
  adam_step(m.imputation->model.params(), g.params, opt.imput, cfg.lr_imputation,
            cfg.weight_decay);
}

std::size_t default_steps(const TrainingSplit& split, std::size_t batch) {
  return std::max(kMinStepsPerEpoch, (split.train_observed.size() + batch - 1) / batch);
}

// Held-out negative log-likelihood per pair of D for continuous labels.
double val_neg_loglik(const TrainingSplit& split, const Models& m, const TrainConfig& cfg) {
  const double w = split.val_observed_fraction();
  double total = 0.0;
  if (!split.val_observed.empty()) {
    total -= w *
             batch_loglik(split.val_observed, LabelKind::continuous, m.model_o, m.model_r, m.corr,
                          LikelihoodMode::continuous, cfg.mc, 0, nullptr) /
             static_cast<double>(split.val_observed.size());
  }
  if (!split.val_unobserved.empty()) {
    total -= (1.0 - w) *
             batch_loglik(split.val_unobserved, LabelKind::continuous, m.model_o, m.model_r,
                          m.corr, LikelihoodMode::continuous, cfg.mc, 0, nullptr) /
             static_cast<double>(split.val_unobserved.size());
  }
  return total;
}

double val_mse(const TrainingSplit& split, const Models& m) {
  double s = 0.0;
  for (const auto& p : split.val_observed) {
    const double d = m.model_r.score(input_for(m.model_r, p)) - p.label;
    s += d * d;
  }
  return split.val_observed.empty() ? 0.0 : s / static_cast<double>(split.val_observed.size());
}

// Validation AUC of the prediction head on held-out observed pairs; when
// only one class is present, the negative cross entropy stands in.
double val_auc(const TrainingSplit& split, const Models& m, const TrainConfig& cfg) {
  std::vector<double> scores;
  std::vector<double> labels;
  bool pos = false;
  bool neg = false;
  for (const auto& p : split.val_observed) {
    scores.push_back(m.model_r.score(input_for(m.model_r, p)));
    labels.push_back(p.label);
    (p.label > 0.5 ? pos : neg) = true;
  }
  if (pos && neg) return auc(scores, labels);
  double ce = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    ce += score_error(labels[i], scores[i], error_kind(cfg));
  }
  return scores.empty() ? 0.0 : -ce / static_cast<double>(scores.size());
}

struct Validator {
  std::string name;
  bool higher_is_better = true;
};

Validator validator_for(const TrainConfig& cfg) {
  if (cfg.mode == LabelKind::binary) return {"val_auc", true};
  if (is_likelihood_method(cfg.method)) return {"val_nll", false};
  return {"val_mse", false};
}

double validate_models(const TrainingSplit& split, const Models& m, const TrainConfig& cfg) {
  if (cfg.mode == LabelKind::binary) return val_auc(split, m, cfg);
  if (is_likelihood_method(cfg.method)) return val_neg_loglik(split, m, cfg);
  return val_mse(split, m);
}

// Shared epoch loop: runs `epoch_fn` until early stopping, keeping the best
// snapshot by the validation metric.
template <class EpochFn>
TrainResult run_epochs(const TrainingSplit& split, Models models, const TrainConfig& cfg,
                       EpochFn&& epoch_fn) {
  const auto start = std::chrono::steady_clock::now();
  const Validator v = validator_for(cfg);
  TrainResult result{models, {}};
  result.trace.val_metric_name = v.name;
  result.trace.higher_is_better = v.higher_is_better;
  std::size_t since_best = 0;
  bool have_best = false;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochRecord rec = epoch_fn(models, epoch);
    rec.epoch = epoch;
    rec.rho = models.corr.value();
    rec.val_metric = validate_models(split, models, cfg);
    require_finite(rec.val_metric, "validation metric", epoch);
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.trace.epochs.push_back(rec);
    const bool better = !have_best || (v.higher_is_better ? rec.val_metric > result.trace.best_val
                                                          : rec.val_metric < result.trace.best_val);
    if (better) {
      have_best = true;
      result.trace.best_val = rec.val_metric;
      result.trace.best_epoch = epoch;
      result.models = models;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return result;
}

}  // namespace

double debias_objective(DebiasKind kind, std::span<const PairSample> obs,
                        std::span<const PairSample> unobs, double w_obs, double w_unobs,
                        std::span<const double> p_obs, const ScoreModel& model_r,
                        const ImputationModel* imput, ErrorKind err, GradBuffer* grads,
                        double scale) {
  if (kind == DebiasKind::none) return 0.0;
  if (obs.empty()) throw ValidationError("debias objective: empty observed batch");
  if ((kind == DebiasKind::ips || kind == DebiasKind::dr) && p_obs.size() != obs.size()) {
    throw ShapeError("propensities do not match the observed batch");
  }
  if ((kind == DebiasKind::eib || kind == DebiasKind::dr) && imput == nullptr) {
    throw ValidationError("debias objective needs an imputation model");
  }
  const double bo = static_cast<double>(obs.size());
  std::vector<double> w(obs.size());
  switch (kind) {
    case DebiasKind::naive: {
      std::fill(w.begin(), w.end(), 1.0 / bo);
      return weighted_errors(obs, w, model_r, err, grads, scale);
    }
    case DebiasKind::ips: {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = w_obs / (bo * p_obs[i]);
      return weighted_errors(obs, w, model_r, err, grads, scale);
    }
    case DebiasKind::eib:
    case DebiasKind::dr: {
      double total = 0.0;
      std::vector<double> w_imp(obs.size());
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double inv_p = kind == DebiasKind::dr ? 1.0 / p_obs[i] : 1.0;
        w[i] = w_obs * inv_p / bo;
        w_imp[i] = kind == DebiasKind::dr ? w_obs * (1.0 - inv_p) / bo : 0.0;
      }
      total += weighted_errors(obs, w, model_r, err, grads, scale);
      if (kind == DebiasKind::dr) {
        total += weighted_imputed_errors(obs, w_imp, model_r, *imput, err, grads, scale);
      }
      if (!unobs.empty() && w_unobs > 0.0) {
        const std::vector<double> wu(unobs.size(), w_unobs / static_cast<double>(unobs.size()));
        total += weighted_imputed_errors(unobs, wu, model_r, *imput, err, grads, scale);
      }
      return total;
    }
    case DebiasKind::none: break;
  }
  return 0.0;
}

PhaseRResult phase_r_objective(const Models& models, const TrainConfig& cfg, DebiasKind kind,
                               std::span<const PairSample> obs, std::span<const PairSample> unobs,
                               double w_obs, std::uint64_t epoch, JointGrads& grads) {
  PhaseRResult out;
  const double b = static_cast<double>(obs.size());
  out.neg_ll = -batch_loglik(obs, cfg.mode, models.model_o, models.model_r, models.corr,
                             LikelihoodMode::binary_r, cfg.mc, epoch, &grads, -cfg.alpha / b) /
               b;
  if (cfg.alpha < 1.0) {
    const PropensityEstimate props = propensities(models, cfg, obs);
    const ImputationModel* imp = models.imputation ? &*models.imputation : nullptr;
    out.debias = debias_objective(kind, obs, unobs, w_obs, 1.0 - w_obs, props.p_hat,
                                  models.model_r, imp, error_kind(cfg), &grads.r, 1.0 - cfg.alpha);
  }
  out.blended = cfg.alpha * out.neg_ll + (1.0 - cfg.alpha) * out.debias;
  return out;
}

TrainResult train_binary(const TrainingSplit& split, Models models, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.mode != LabelKind::binary) throw ValidationError("train_binary needs binary labels");
  const DebiasKind kind = debias_kind_of(cfg.method);
  const std::size_t steps_r = cfg.steps_r ? cfg.steps_r : default_steps(split, cfg.batch_r);
  const std::size_t steps_d = cfg.steps_d ? cfg.steps_d : steps_r;
  const double w_obs = split.train_observed_fraction();
  Optimizers opt(models);
  Sampler sampler(split, cfg.seed);
  JointGrads grads(models.model_o, models.model_r);
  const bool needs_unobs = kind == DebiasKind::eib || kind == DebiasKind::dr;

  return run_epochs(split, std::move(models), cfg, [&](Models& m, std::size_t epoch) {
    EpochRecord rec;
    sampler.start_epoch(epoch);
    for (std::size_t s = 0; s < steps_r; ++s) {
      const auto obs = sampler.next_observed(cfg.batch_r);
      const auto unobs = needs_unobs && cfg.alpha < 1.0 ? sampler.random_unobserved(cfg.batch_r)
                                                        : std::vector<PairSample>{};
      grads.zero();
      const PhaseRResult pr = phase_r_objective(m, cfg, kind, obs, unobs, w_obs, epoch, grads);
      require_finite(pr.blended, "prediction-phase objective", epoch);
      adam_step(m.model_r.params(), grads.r.params, opt.r, cfg.lr_r, cfg.weight_decay);
      step_rho(m, grads.rho_raw, opt, cfg);
      if (cfg.alpha < 1.0) {
        imputation_step(m, cfg, kind, obs, propensities(m, cfg, obs), opt);
      }
      rec.neg_ll_r += pr.neg_ll / static_cast<double>(steps_r);
      rec.blended += pr.blended / static_cast<double>(steps_r);
    }
    for (std::size_t s = 0; s < steps_d; ++s) {
      const auto obs = sampler.random_observed(cfg.batch_d);
      const auto unobs = sampler.random_unobserved(cfg.batch_d);
      grads.zero();
      const double bo = static_cast<double>(obs.size());
      double ll = w_obs *
                  batch_loglik(obs, cfg.mode, m.model_o, m.model_r, m.corr,
                               LikelihoodMode::binary_d, cfg.mc, epoch, &grads, -w_obs / bo) /
                  bo;
      if (!unobs.empty()) {
        const double bu = static_cast<double>(unobs.size());
        ll += (1.0 - w_obs) *
              batch_loglik(unobs, cfg.mode, m.model_o, m.model_r, m.corr,
                           LikelihoodMode::binary_d, cfg.mc, epoch, &grads,
                           -(1.0 - w_obs) / bu) /
              bu;
      }
      require_finite(ll, "selection-phase log-likelihood", epoch);
      adam_step(m.model_o.params(), grads.o.params, opt.o, cfg.lr_o, cfg.weight_decay);
      step_rho(m, grads.rho_raw, opt, cfg);
      rec.neg_ll_d += -ll / static_cast<double>(steps_d);
    }
    return rec;
  });
}

double warm_start_continuous(const TrainingSplit& split, Models& models, const TrainConfig& cfg) {
  if (cfg.warm_start_epochs == 0) return 0.0;
  const std::size_t steps = cfg.steps_r ? cfg.steps_r : default_steps(split, cfg.batch_r);
  const double w_obs = split.train_observed_fraction();
  Sampler sampler(split, mix_keys(cfg.seed, 0x5741524D));
  AdamState opt_o(models.model_o.num_params());
  AdamState opt_r(models.model_r.num_params());
  AdamState opt_c(1);
  double c = 0.0;
  for (std::size_t e = 1; e <= cfg.warm_start_epochs; ++e) {
    sampler.start_epoch(e);
    for (std::size_t s = 0; s < steps; ++s) {
      const auto obs = sampler.next_observed(cfg.batch_r);
      const auto unobs = sampler.random_unobserved(cfg.batch_d);
      GradBuffer g = models.model_o.make_grad();
      double loss = 0.0;
      const auto add = [&](std::span<const PairSample> batch, double target, double w) {
        const double scale = w / static_cast<double>(batch.size());
        for (const auto& p : batch) {
          const ScoreInput in = input_for(models.model_o, p);
          double d = 0.0;
          loss += scale * score_error(target, models.model_o.score(in),
                                      ErrorKind::probit_cross_entropy, &d);
          models.model_o.accumulate_grad(in, scale * d, g);
        }
      };
      add(obs, 1.0, w_obs);
      if (!unobs.empty()) add(unobs, 0.0, 1.0 - w_obs);
      require_finite(loss, "warm-start selection loss", e);
      adam_step(models.model_o.params(), g.params, opt_o, cfg.lr_o, cfg.weight_decay);
    }
  }
  for (std::size_t e = 1; e <= cfg.warm_start_epochs; ++e) {
    sampler.start_epoch(mix_keys(0x52, e));
    for (std::size_t s = 0; s < steps; ++s) {
      const auto obs = sampler.next_observed(cfg.batch_r);
      GradBuffer g = models.model_r.make_grad();
      double g_c = 0.0;
      double loss = 0.0;
      const double scale = 1.0 / static_cast<double>(obs.size());
      for (const auto& p : obs) {
        const double lam = inverse_mills(models.model_o.score(input_for(models.model_o, p)));
        const ScoreInput in = input_for(models.model_r, p);
        const double resid = models.model_r.score(in) + c * lam - p.label;
        loss += scale * resid * resid;
        models.model_r.accumulate_grad(in, scale * 2.0 * resid, g);
        g_c += scale * 2.0 * resid * lam;
      }
      require_finite(loss, "warm-start regression loss", e);
      adam_step(models.model_r.params(), g.params, opt_r, cfg.lr_r, cfg.weight_decay);
      double cg[1] = {g_c};
      double cp[1] = {c};
      adam_step(cp, cg, opt_c, cfg.lr_rho, 0.0);
      c = cp[0];
    }
  }
  models.corr = CorrelationParam::from_value(std::clamp(c, -0.9, 0.9));
  return c;
}

namespace {

// One pass of continuous-likelihood steps. rho stays fixed when free_rho is
// false.
struct ContinuousStepper {
  const TrainingSplit& split;
  const TrainConfig& cfg;
  DebiasKind kind;
  std::size_t steps;
  double w_obs;
  Optimizers opt;
  Sampler sampler;
  JointGrads grads;

  ContinuousStepper(const TrainingSplit& sp, const Models& m, const TrainConfig& c, std::uint64_t key)
      : split(sp),
        cfg(c),
        kind(debias_kind_of(c.method)),
        steps(c.steps_r ? c.steps_r : default_steps(sp, c.batch_r)),
        w_obs(sp.train_observed_fraction()),
        opt(m),
        sampler(sp, key),
        grads(m.model_o, m.model_r) {}

  EpochRecord epoch(Models& m, std::uint64_t epoch_key, bool free_rho) {
    EpochRecord rec;
    sampler.start_epoch(epoch_key);
    for (std::size_t s = 0; s < steps; ++s) {
      const auto obs = sampler.next_observed(cfg.batch_r);
      const auto unobs = sampler.random_unobserved(cfg.batch_d);
      grads.zero();
      const double bo = static_cast<double>(obs.size());
      const double ll_obs =
          batch_loglik(obs, cfg.mode, m.model_o, m.model_r, m.corr, LikelihoodMode::continuous,
                       cfg.mc, epoch_key, &grads, -cfg.alpha * w_obs / bo) /
          bo;
      double ll_mis = 0.0;
      if (!unobs.empty()) {
        const double bu = static_cast<double>(unobs.size());
        ll_mis = batch_loglik(unobs, cfg.mode, m.model_o, m.model_r, m.corr,
                              LikelihoodMode::continuous, cfg.mc, epoch_key, &grads,
                              -cfg.alpha * (1.0 - w_obs) / bu) /
                 bu;
      }
      const double neg_ll = -(w_obs * ll_obs + (1.0 - w_obs) * ll_mis);
      double debias = 0.0;
      if (cfg.alpha < 1.0) {
        const PropensityEstimate props = propensities(m, cfg, obs);
        const ImputationModel* imp = m.imputation ? &*m.imputation : nullptr;
        debias = debias_objective(kind, obs, unobs, w_obs, 1.0 - w_obs, props.p_hat, m.model_r,
                                  imp, error_kind(cfg), &grads.r, 1.0 - cfg.alpha);
      }
      const double blended = cfg.alpha * neg_ll + (1.0 - cfg.alpha) * debias;
      require_finite(blended, "continuous objective", epoch_key);
      adam_step(m.model_o.params(), grads.o.params, opt.o, cfg.lr_o, cfg.weight_decay);
      adam_step(m.model_r.params(), grads.r.params, opt.r, cfg.lr_r, cfg.weight_decay);
      if (free_rho) step_rho(m, grads.rho_raw, opt, cfg);
      if (cfg.alpha < 1.0) imputation_step(m, cfg, kind, obs, propensities(m, cfg, obs), opt);
      rec.neg_ll_r += neg_ll / static_cast<double>(steps);
      rec.blended += blended / static_cast<double>(steps);
    }
    return rec;
  }
};

}  // namespace

std::vector<ProfilePoint> profile_rho(const TrainingSplit& split, Models& models,
                                      const TrainConfig& cfg) {
  std::vector<ProfilePoint> out;
  if (cfg.rho_grid.empty() || cfg.profile_epochs == 0) return out;
  std::optional<Models> best;
  double best_val = 0.0;
  for (std::size_t g = 0; g < cfg.rho_grid.size(); ++g) {
    Models m = models;
    m.corr = CorrelationParam::from_value(cfg.rho_grid[g]);
    ContinuousStepper stepper(split, m, cfg, mix_keys(cfg.seed, 0x50524F46, g));
    for (std::size_t e = 1; e <= cfg.profile_epochs; ++e) stepper.epoch(m, e, false);
    const double val = val_neg_loglik(split, m, cfg);
    require_finite(val, "profile validation likelihood", g);
    out.push_back({cfg.rho_grid[g], val});
    if (!best || val < best_val) {
      best_val = val;
      best = std::move(m);
    }
  }
  models = std::move(*best);
  return out;
}

TrainResult train_continuous(const TrainingSplit& split, Models models, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.mode != LabelKind::continuous) {
    throw ValidationError("train_continuous needs continuous labels");
  }
  warm_start_continuous(split, models, cfg);
  std::vector<ProfilePoint> profile = profile_rho(split, models, cfg);
  ContinuousStepper stepper(split, models, cfg, cfg.seed);
  TrainResult result = run_epochs(split, std::move(models), cfg, [&](Models& m, std::size_t epoch) {
    return stepper.epoch(m, epoch, true);
  });
  result.trace.rho_profile = std::move(profile);
  return result;
}

TrainResult train_baseline(const TrainingSplit& split, Models models, const TrainConfig& cfg) {
  cfg.validate();
  if (is_likelihood_method(cfg.method)) {
    throw ValidationError("train_baseline runs naive, eib, ips or dr");
  }
  const DebiasKind kind = debias_kind_of(cfg.method);
  const ErrorKind err = error_kind(cfg);
  const std::size_t steps = cfg.steps_r ? cfg.steps_r : default_steps(split, cfg.batch_r);
  const std::size_t steps_d = cfg.steps_d ? cfg.steps_d : steps;
  const double w_obs = split.train_observed_fraction();
  Optimizers opt(models);
  Sampler sampler(split, cfg.seed);

  // Logistic propensity model fitted on observation bits before training.
  if (kind == DebiasKind::ips || kind == DebiasKind::dr) {
    for (std::size_t e = 1; e <= cfg.propensity_epochs; ++e) {
      sampler.start_epoch(mix_keys(0x50524F50, e));
      for (std::size_t s = 0; s < steps_d; ++s) {
        const auto obs = sampler.random_observed(cfg.batch_d);
        const auto unobs = sampler.random_unobserved(cfg.batch_d);
        GradBuffer g = models.model_o.make_grad();
        double loss = w_obs * propensity_bce(obs, models.model_o, &g, w_obs);
        if (!unobs.empty()) {
          loss += (1.0 - w_obs) * propensity_bce(unobs, models.model_o, &g, 1.0 - w_obs);
        }
        require_finite(loss, "propensity loss", e);
        adam_step(models.model_o.params(), g.params, opt.o, cfg.lr_o, cfg.weight_decay);
      }
    }
  }
  const bool needs_unobs = kind == DebiasKind::eib || kind == DebiasKind::dr;

  return run_epochs(split, std::move(models), cfg, [&](Models& m, std::size_t epoch) {
    EpochRecord rec;
    sampler.start_epoch(epoch);
    for (std::size_t s = 0; s < steps; ++s) {
      const auto obs = sampler.next_observed(cfg.batch_r);
      const auto unobs =
          needs_unobs ? sampler.random_unobserved(cfg.batch_r) : std::vector<PairSample>{};
      const PropensityEstimate props = propensities(m, cfg, obs);
      GradBuffer g = m.model_r.make_grad();
      const ImputationModel* imp = m.imputation ? &*m.imputation : nullptr;
      const double loss = debias_objective(kind, obs, unobs, w_obs, 1.0 - w_obs, props.p_hat,
                                           m.model_r, imp, err, &g);
      require_finite(loss, "debias loss", epoch);
      adam_step(m.model_r.params(), g.params, opt.r, cfg.lr_r, cfg.weight_decay);
      imputation_step(m, cfg, kind, obs, props, opt);
      rec.neg_ll_r += loss / static_cast<double>(steps);
    }
    rec.blended = rec.neg_ll_r;
    return rec;
  });
}

TrainResult train(const InteractionDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.label_kind() != cfg.mode) {
    throw ValidationError(std::string("dataset labels are ") + label_kind_name(data.label_kind()) +
                          " but the run is configured for " + label_kind_name(cfg.mode));
  }
  const TrainingSplit split = make_training_split(data, cfg.val_fraction, cfg.seed);
  Models models = make_models(data, cfg);
  if (!is_likelihood_method(cfg.method)) return train_baseline(split, std::move(models), cfg);
  if (cfg.mode == LabelKind::continuous) return train_continuous(split, std::move(models), cfg);
  return train_binary(split, std::move(models), cfg);
}

double predict(const Models& models, Method method, LabelKind labels, const PairSample& s) {
  const double g = models.model_r.score(input_for(models.model_r, s));
  if (labels == LabelKind::continuous) return g;
  return is_likelihood_method(method) ? std_normal_cdf(g) : logistic(g);
}

EvalReport evaluate(const Models& models, Method method, const InteractionDataset& data,
                    std::span<const Interaction> test, std::size_t k) {
  if (test.empty()) throw ValidationError("empty test set");
  if (k == 0) throw ValidationError("k must be positive");
  check_model_shape(models.model_r, data.users(), data.items());
  const LabelKind labels = data.label_kind();
  std::vector<double> preds;
  std::vector<double> truth;
  std::vector<double> relevant;
  std::vector<std::uint32_t> users;
  std::vector<std::uint32_t> items;
  preds.reserve(test.size());
  for (const auto& it : test) {
    if (it.user >= data.users() || it.item >= data.items()) {
      throw ShapeError("test pair outside the training grid");
    }
    preds.push_back(predict(models, method, labels, data.labelled_sample(it)));
    truth.push_back(it.label);
    const double cut = labels == LabelKind::binary ? 0.5 : 0.0;
    relevant.push_back(it.label > cut ? 1.0 : 0.0);
    users.push_back(it.user);
    items.push_back(it.item);
  }
  EvalReport rep;
  rep.k = k;
  rep.n_test = test.size();
  rep.mse = mse(preds, truth);
  const bool both = std::find(relevant.begin(), relevant.end(), 1.0) != relevant.end() &&
                    std::find(relevant.begin(), relevant.end(), 0.0) != relevant.end();
  if (both) {
    rep.auc = auc(preds, relevant);
    rep.has_auc = true;
  }
  const auto lists = group_by_user(users, items, preds, relevant);
  rep.recall_at_k = recall_at_k(lists, k);
  rep.ndcg_at_k = ndcg_at_k(lists, k);
  return rep;
}

}  // namespace exoc
