#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "exoc/baselines.hpp"
#include "exoc/dataset.hpp"
#include "exoc/likelihood.hpp"
#include "exoc/metrics.hpp"
#include "exoc/scoremodel.hpp"

namespace exoc {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One Adam update (beta1 0.9, beta2 0.999, eps 1e-8, bias corrected) with
/// L2 weight decay added to the gradient. Throws ShapeError on size mismatch.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr, double weight_decay);

enum class Method { naive, eib, ips, dr, ours_naive, ours_dr, ours_mle };

Method parse_method(const std::string& s);
const char* method_name(Method m);
bool is_likelihood_method(Method m);

enum class DebiasKind { none, naive, eib, ips, dr };
DebiasKind debias_kind_of(Method m);

enum class Backbone { mf, feature };
Backbone parse_backbone(const std::string& s);
const char* backbone_name(Backbone b);

// Default steps per epoch are one pass over the observed training pairs but
// at least this many, so small datasets get enough updates per patience
// window.
inline constexpr std::size_t kMinStepsPerEpoch = 50;

struct TrainConfig {
  Method method = Method::ours_naive;
  double alpha = 0.8;
  LabelKind mode = LabelKind::binary;
  Backbone backbone = Backbone::mf;
  std::size_t embed_dim = 8;
  std::vector<std::size_t> mlp_hidden{8};
  // 0 means one pass over the observed training pairs.
  std::size_t steps_r = 0;
  std::size_t steps_d = 0;
  std::size_t batch_r = 256;
  std::size_t batch_d = 256;
  double lr_r = 0.01;
  double lr_o = 0.01;
  double lr_rho = 0.01;
  double lr_imputation = 0.01;
  double weight_decay = 1e-5;
  double clip_floor = 0.05;
  double val_fraction = 0.1;
  std::size_t propensity_epochs = 5;
  // Two-step warm start before joint continuous training: a probit fit of
  // the selection head, then a regression of y on g_r + c * lambda(g_o)
  // whose coefficient c seeds rho.
  std::size_t warm_start_epochs = 10;
  // Continuous training first fits the heads with rho held at each grid
  // value for profile_epochs epochs and continues from the best held-out
  // likelihood. An empty grid skips the search.
  std::vector<double> rho_grid{-0.8, -0.4, 0.0, 0.4, 0.8};
  std::size_t profile_epochs = 30;
  MCConfig mc;
  std::size_t max_epochs = 200;
  std::size_t patience = 5;
  std::uint64_t seed = 1;

  void validate() const;
  /// Learning rate applied to every parameter group.
  void set_lr(double lr);
};

struct EpochRecord {
  std::size_t epoch = 0;
  double neg_ll_r = 0.0;
  double neg_ll_d = 0.0;
  double blended = 0.0;
  double rho = 0.0;
  double val_metric = 0.0;
  double seconds = 0.0;
};

struct ProfilePoint {
  double rho = 0.0;
  double val_nll = 0.0;
};

struct TrainTrace {
  std::vector<EpochRecord> epochs;
  std::vector<ProfilePoint> rho_profile;
  std::string val_metric_name;
  bool higher_is_better = true;
  std::size_t best_epoch = 0;
  double best_val = 0.0;

  void write_csv(const std::filesystem::path& path) const;
  /// Equality over every field except wall-clock seconds.
  bool same_numbers(const TrainTrace& other) const;
};

struct Models {
  ScoreModel model_o;  // selection head, or the logistic propensity model for baselines
  ScoreModel model_r;  // prediction head
  CorrelationParam corr;
  std::optional<ImputationModel> imputation;
};

/// Builds untrained heads for a dataset under the configured backbone. The
/// feature backbone uses a linear prediction head and an MLP selection head
/// over the scalar feature.
Models make_models(const InteractionDataset& data, const TrainConfig& cfg);

struct TrainResult {
  Models models;
  TrainTrace trace;
};

// Training data split into what the optimizer sees and a held-out
// validation portion: a keyed-hash fraction of the pairs of D is held out
// and never sampled for training.
struct TrainingSplit {
  const InteractionDataset* data = nullptr;
  std::vector<std::size_t> train_observed;  // indices into data->observed()
  std::vector<PairSample> val_observed;
  std::vector<PairSample> val_unobserved;   // uniform sample of held-out unobserved pairs
  std::uint64_t n_train_pairs = 0;
  std::uint64_t n_val_pairs = 0;
  std::uint64_t holdout_key = 0;
  double val_fraction = 0.0;

  bool held_out(std::uint64_t flat) const;
  /// |O| / |D| over the training (resp. held-out) pairs.
  double train_observed_fraction() const;
  double val_observed_fraction() const;
};

inline constexpr std::size_t kMaxValUnobserved = 20000;

TrainingSplit make_training_split(const InteractionDataset& data, double val_fraction,
                                  std::uint64_t seed);

/// Algorithm of alternating phases: per epoch, steps_r prediction-phase
/// batches from O update (theta_r, rho) against
/// alpha * (-L^R) + (1 - alpha) * L_debias; then steps_d batches from D
/// update (theta_o, rho) against -L^D.
TrainResult train_binary(const TrainingSplit& split, Models models, const TrainConfig& cfg);

/// Runs the two-step warm start in place and returns the fitted coefficient
/// of the inverse Mills ratio.
double warm_start_continuous(const TrainingSplit& split, Models& models, const TrainConfig& cfg);

/// Fits the heads at each fixed grid value of rho and leaves models at the
/// grid point with the lowest held-out negative log-likelihood.
std::vector<ProfilePoint> profile_rho(const TrainingSplit& split, Models& models,
                                      const TrainConfig& cfg);

/// Joint minimization of the continuous negative log-likelihood (blended with
/// the debias loss on theta_r when alpha < 1).
TrainResult train_continuous(const TrainingSplit& split, Models models, const TrainConfig& cfg);

/// Standalone Naive / EIB / IPS / DR with a logistic propensity model.
TrainResult train_baseline(const TrainingSplit& split, Models models, const TrainConfig& cfg);

/// Splits, builds models and dispatches on method and label mode.
TrainResult train(const InteractionDataset& data, const TrainConfig& cfg);

// Batch-level objective shared by the baselines and the prediction phase.
// obs: observed pairs; unobs: unobserved pairs; w_obs / w_unobs are the
// population fractions |O|/|D| and 1 - |O|/|D| used to weight the two
// strata; p_obs are clipped propensities for obs. Returns the loss and adds
// scale * gradient into grads.
double debias_objective(DebiasKind kind, std::span<const PairSample> obs,
                        std::span<const PairSample> unobs, double w_obs, double w_unobs,
                        std::span<const double> p_obs, const ScoreModel& model_r,
                        const ImputationModel* imput, ErrorKind err, GradBuffer* grads,
                        double scale = 1.0);

struct PhaseRResult {
  double neg_ll = 0.0;
  double debias = 0.0;
  double blended = 0.0;
};

/// Gradient of the prediction-phase objective on one frozen batch, exposed
/// so the alpha = 0 degeneracy can be checked against debias_objective.
PhaseRResult phase_r_objective(const Models& models, const TrainConfig& cfg, DebiasKind kind,
                               std::span<const PairSample> obs, std::span<const PairSample> unobs,
                               double w_obs, std::uint64_t epoch, JointGrads& grads);

/// Predicted preference for a pair: g_r for continuous labels, Phi(g_r) for
/// likelihood methods and logistic(g_r) for baselines on binary labels.
double predict(const Models& models, Method method, LabelKind labels, const PairSample& s);

/// MSE on the raw labels plus AUC / Recall@k / NDCG@k with positives
/// label > 0.5 (binary) or label > 0 (continuous).
EvalReport evaluate(const Models& models, Method method, const InteractionDataset& data,
                    std::span<const Interaction> test, std::size_t k);

}  // namespace exoc
