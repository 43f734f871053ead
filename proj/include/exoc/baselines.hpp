#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "exoc/dataset.hpp"
#include "exoc/scoremodel.hpp"

namespace exoc {

// cross_entropy scores a logistic link, probit_cross_entropy a Phi link.
enum class ErrorKind { cross_entropy, probit_cross_entropy, squared };

ErrorKind error_kind_for(LabelKind labels);

double logistic(double s);

/// e(r, r_hat): cross entropy (r_hat in (0,1)) or squared error. Throws
/// ValidationError when r_hat leaves (0, 1) for cross entropy.
double prediction_error(double r, double r_hat, ErrorKind kind);

/// Error of a raw score against a (possibly soft) target, in the score
/// domain: softplus(s) - target*s for cross entropy, (target - s)^2 for
/// squared, -t log Phi(s) - (1-t) log Phi(-s) for probit cross entropy.
/// Writes d e / d s and d e / d target.
double score_error(double target, double score, ErrorKind kind, double* d_score = nullptr,
                   double* d_target = nullptr);

/// Maps an imputation-model score to a pseudo-label: logistic for cross
/// entropy, Phi for probit cross entropy, identity for squared error.
double pseudo_label(double score, ErrorKind kind);
/// d pseudo_label / d score.
double pseudo_label_slope(double score, ErrorKind kind);

struct PropensityEstimate {
  std::vector<double> p_hat;
  double clip_floor = 0.05;
};

/// p_hat = max(Phi(g_o), clip_floor).
PropensityEstimate propensity_from_selection_head(const ScoreModel& model_o,
                                                  std::span<const PairSample> pairs,
                                                  double clip_floor = 0.05);
/// p_hat = max(logistic(g), clip_floor) for a logistic propensity model.
PropensityEstimate propensity_logistic(const ScoreModel& model, std::span<const PairSample> pairs,
                                       double clip_floor = 0.05);

/// Imputation model m(x; phi); its score is mapped to a pseudo-label.
struct ImputationModel {
  ScoreModel model;
};

// Estimators over per-pair error arrays (no models involved).
double naive_estimate(std::span<const double> e_observed);
double ips_estimate(std::span<const double> e, std::span<const std::uint8_t> o,
                    std::span<const double> p_hat);
double dr_estimate(std::span<const double> e, std::span<const double> e_hat,
                   std::span<const std::uint8_t> o, std::span<const double> p_hat);
double eib_estimate(std::span<const double> e, std::span<const double> e_hat,
                    std::span<const std::uint8_t> o);

/// sum_i w_i e_i over the samples; grads (if non-null) += scale * d/d theta_r.
double weighted_errors(std::span<const PairSample> samples, std::span<const double> weights,
                       const ScoreModel& model_r, ErrorKind kind, GradBuffer* grads,
                       double scale = 1.0);
/// sum_i w_i e_hat_i with e_hat_i = e(pseudo_label_i, g_r); the pseudo-label
/// is held fixed, so only theta_r receives gradient.
double weighted_imputed_errors(std::span<const PairSample> samples,
                               std::span<const double> weights, const ScoreModel& model_r,
                               const ImputationModel& imput, ErrorKind kind, GradBuffer* grads,
                               double scale = 1.0);

// Model-level losses on one slice. Gradients with respect to theta_r are
// accumulated into grads (times scale) when grads is non-null. Every loss
// throws ValidationError on an empty slice.
double naive_loss(std::span<const PairSample> observed, const ScoreModel& model_r,
                  ErrorKind kind, GradBuffer* grads, double scale = 1.0);
double ips_loss(std::span<const PairSample> slice, const ScoreModel& model_r,
                const PropensityEstimate& props, ErrorKind kind, GradBuffer* grads,
                double scale = 1.0);
double dr_loss(std::span<const PairSample> slice, const ScoreModel& model_r,
               const ImputationModel& imput, const PropensityEstimate& props, ErrorKind kind,
               GradBuffer* grads, double scale = 1.0);
double eib_loss(std::span<const PairSample> slice, const ScoreModel& model_r,
                const ImputationModel& imput, ErrorKind kind, GradBuffer* grads,
                double scale = 1.0);

/// Inverse-propensity weighted fit of the pseudo-labels to the observed
/// labels: loss = mean_O e(r, pseudo_label) / p_hat, so that imputed errors
/// equal observed errors at the optimum. Accumulates d loss / d phi into
/// imput_grads and returns the loss.
double update_imputation(std::span<const PairSample> observed, const ImputationModel& imput,
                         const PropensityEstimate& props, ErrorKind kind, GradBuffer& imput_grads,
                         double scale = 1.0);

/// Binary cross entropy of a logistic propensity model on observation bits;
/// returns the mean loss and accumulates its gradient.
double propensity_bce(std::span<const PairSample> slice, const ScoreModel& model,
                      GradBuffer* grads, double scale = 1.0);

}  // namespace exoc
