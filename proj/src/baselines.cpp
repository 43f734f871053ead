#include "exoc/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "exoc/error.hpp"
#include "exoc/numkernel.hpp"

namespace exoc {

ErrorKind error_kind_for(LabelKind labels) {
  return labels == LabelKind::binary ? ErrorKind::cross_entropy : ErrorKind::squared;
}

double logistic(double s) {
  if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

namespace {

double softplus(double s) { return s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw ValidationError(std::string(what) + ": empty slice");
}

}  // namespace

double prediction_error(double r, double r_hat, ErrorKind kind) {
  if (kind == ErrorKind::squared) return (r - r_hat) * (r - r_hat);
  // Both cross-entropy kinds score a probability; they differ only in the link.
  if (!(r_hat > 0.0 && r_hat < 1.0)) {
    throw ValidationError("cross entropy needs a prediction strictly inside (0, 1)");
  }
  return -r * std::log(r_hat) - (1.0 - r) * std::log1p(-r_hat);
}

double score_error(double target, double score, ErrorKind kind, double* d_score,
                   double* d_target) {
  if (kind == ErrorKind::squared) {
    const double diff = score - target;
    if (d_score) *d_score = 2.0 * diff;
    if (d_target) *d_target = -2.0 * diff;
    return diff * diff;
  }
  if (kind == ErrorKind::probit_cross_entropy) {
    const double log_pos = log_std_normal_cdf(score);
    const double log_neg = log_std_normal_cdf(-score);
    if (d_score) *d_score = -target * inverse_mills(score) + (1.0 - target) * inverse_mills(-score);
    if (d_target) *d_target = log_neg - log_pos;
    return -target * log_pos - (1.0 - target) * log_neg;
  }
  if (d_score) *d_score = logistic(score) - target;
  if (d_target) *d_target = -score;
  return softplus(score) - target * score;
}

double pseudo_label(double score, ErrorKind kind) {
  switch (kind) {
    case ErrorKind::cross_entropy: return logistic(score);
    case ErrorKind::probit_cross_entropy: return std_normal_cdf(score);
    case ErrorKind::squared: break;
  }
  return score;
}

double pseudo_label_slope(double score, ErrorKind kind) {
  switch (kind) {
    case ErrorKind::cross_entropy: {
      const double t = logistic(score);
      return t * (1.0 - t);
    }
    case ErrorKind::probit_cross_entropy: return std_normal_pdf(score);
    case ErrorKind::squared: break;
  }
  return 1.0;
}

PropensityEstimate propensity_from_selection_head(const ScoreModel& model_o,
                                                  std::span<const PairSample> pairs,
                                                  double clip_floor) {
  PropensityEstimate est;
  est.clip_floor = clip_floor;
  est.p_hat.reserve(pairs.size());
  for (const auto& s : pairs) {
    est.p_hat.push_back(std::max(std_normal_cdf(model_o.score(input_for(model_o, s))), clip_floor));
  }
  return est;
}

PropensityEstimate propensity_logistic(const ScoreModel& model, std::span<const PairSample> pairs,
                                       double clip_floor) {
  PropensityEstimate est;
  est.clip_floor = clip_floor;
  est.p_hat.reserve(pairs.size());
  for (const auto& s : pairs) {
    est.p_hat.push_back(std::max(logistic(model.score(input_for(model, s))), clip_floor));
  }
  return est;
}

double naive_estimate(std::span<const double> e_observed) {
  require_nonempty(e_observed.size(), "naive estimate");
  double s = 0.0;
  for (double e : e_observed) s += e;
  return s / static_cast<double>(e_observed.size());
}

double ips_estimate(std::span<const double> e, std::span<const std::uint8_t> o,
                    std::span<const double> p_hat) {
  require_nonempty(e.size(), "ips estimate");
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (o[i]) s += e[i] / p_hat[i];
  }
  return s / static_cast<double>(e.size());
}

double dr_estimate(std::span<const double> e, std::span<const double> e_hat,
                   std::span<const std::uint8_t> o, std::span<const double> p_hat) {
  require_nonempty(e.size(), "dr estimate");
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    s += e_hat[i];
    if (o[i]) s += (e[i] - e_hat[i]) / p_hat[i];
  }
  return s / static_cast<double>(e.size());
}

double eib_estimate(std::span<const double> e, std::span<const double> e_hat,
                    std::span<const std::uint8_t> o) {
  require_nonempty(e.size(), "eib estimate");
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) s += o[i] ? e[i] : e_hat[i];
  return s / static_cast<double>(e.size());
}

double weighted_errors(std::span<const PairSample> samples, std::span<const double> weights,
                       const ScoreModel& model_r, ErrorKind kind, GradBuffer* grads,
                       double scale) {
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const ScoreInput in = input_for(model_r, samples[i]);
    double d_score = 0.0;
    total += weights[i] * score_error(samples[i].label, model_r.score(in), kind, &d_score);
    if (grads) model_r.accumulate_grad(in, scale * weights[i] * d_score, *grads);
  }
  return total;
}

double weighted_imputed_errors(std::span<const PairSample> samples,
                               std::span<const double> weights, const ScoreModel& model_r,
                               const ImputationModel& imput, ErrorKind kind, GradBuffer* grads,
                               double scale) {
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const double target = pseudo_label(imput.model.score(input_for(imput.model, samples[i])), kind);
    const ScoreInput in = input_for(model_r, samples[i]);
    double d_score = 0.0;
    total += weights[i] * score_error(target, model_r.score(in), kind, &d_score);
    if (grads) model_r.accumulate_grad(in, scale * weights[i] * d_score, *grads);
  }
  return total;
}

double naive_loss(std::span<const PairSample> observed, const ScoreModel& model_r,
                  ErrorKind kind, GradBuffer* grads, double scale) {
  require_nonempty(observed.size(), "naive loss");
  const std::vector<double> w(observed.size(), 1.0 / static_cast<double>(observed.size()));
  return weighted_errors(observed, w, model_r, kind, grads, scale);
}

double ips_loss(std::span<const PairSample> slice, const ScoreModel& model_r,
                const PropensityEstimate& props, ErrorKind kind, GradBuffer* grads,
                double scale) {
  require_nonempty(slice.size(), "ips loss");
  if (props.p_hat.size() != slice.size()) throw ShapeError("propensities do not match slice");
  const double n = static_cast<double>(slice.size());
  std::vector<double> w(slice.size());
  for (std::size_t i = 0; i < slice.size(); ++i) {
    w[i] = slice[i].observed ? 1.0 / (n * props.p_hat[i]) : 0.0;
  }
  return weighted_errors(slice, w, model_r, kind, grads, scale);
}

double dr_loss(std::span<const PairSample> slice, const ScoreModel& model_r,
               const ImputationModel& imput, const PropensityEstimate& props, ErrorKind kind,
               GradBuffer* grads, double scale) {
  require_nonempty(slice.size(), "dr loss");
  if (props.p_hat.size() != slice.size()) throw ShapeError("propensities do not match slice");
  const double n = static_cast<double>(slice.size());
  std::vector<double> w_obs(slice.size());
  std::vector<double> w_imp(slice.size());
  for (std::size_t i = 0; i < slice.size(); ++i) {
    const double ratio = slice[i].observed ? 1.0 / props.p_hat[i] : 0.0;
    w_obs[i] = ratio / n;
    w_imp[i] = (1.0 - ratio) / n;
  }
  return weighted_errors(slice, w_obs, model_r, kind, grads, scale) +
         weighted_imputed_errors(slice, w_imp, model_r, imput, kind, grads, scale);
}

double eib_loss(std::span<const PairSample> slice, const ScoreModel& model_r,
                const ImputationModel& imput, ErrorKind kind, GradBuffer* grads,
                double scale) {
  require_nonempty(slice.size(), "eib loss");
  const double n = static_cast<double>(slice.size());
  std::vector<double> w_obs(slice.size());
  std::vector<double> w_imp(slice.size());
  for (std::size_t i = 0; i < slice.size(); ++i) {
    w_obs[i] = slice[i].observed ? 1.0 / n : 0.0;
    w_imp[i] = slice[i].observed ? 0.0 : 1.0 / n;
  }
  return weighted_errors(slice, w_obs, model_r, kind, grads, scale) +
         weighted_imputed_errors(slice, w_imp, model_r, imput, kind, grads, scale);
}

double update_imputation(std::span<const PairSample> observed, const ImputationModel& imput,
                         const PropensityEstimate& props, ErrorKind kind, GradBuffer& imput_grads,
                         double scale) {
  require_nonempty(observed.size(), "imputation update");
  if (props.p_hat.size() != observed.size()) throw ShapeError("propensities do not match slice");
  const double n = static_cast<double>(observed.size());
  double total = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const PairSample& s = observed[i];
    const ScoreInput in = input_for(imput.model, s);
    double d_score = 0.0;
    total += score_error(s.label, imput.model.score(in), kind, &d_score) / props.p_hat[i];
    imput.model.accumulate_grad(in, scale * d_score / (props.p_hat[i] * n), imput_grads);
  }
  return total / n;
}

double propensity_bce(std::span<const PairSample> slice, const ScoreModel& model,
                      GradBuffer* grads, double scale) {
  require_nonempty(slice.size(), "propensity fit");
  const double n = static_cast<double>(slice.size());
  double total = 0.0;
  for (const auto& s : slice) {
    const ScoreInput in = input_for(model, s);
    double d_score = 0.0;
    total += score_error(s.observed ? 1.0 : 0.0, model.score(in), ErrorKind::cross_entropy,
                         &d_score);
    if (grads) model.accumulate_grad(in, scale * d_score / n, *grads);
  }
  return total / n;
}

}  // namespace exoc
