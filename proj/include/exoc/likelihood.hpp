#pragma once

#include <cstdint>
#include <span>

#include "exoc/dataset.hpp"
#include "exoc/numkernel.hpp"
#include "exoc/scoremodel.hpp"

namespace exoc {

/// One summand of a log-likelihood with its partials in (g_o, g_r, rho).
/// d_rho is with respect to rho itself; callers chain through tanh.
struct LikelihoodTerm {
  double value = 0.0;
  double d_go = 0.0;
  double d_gr = 0.0;
  double d_rho = 0.0;
};

struct MCConfig {
  std::size_t samples = 64;
  std::uint64_t seed = 0;
  double floor_eps = 1e-9;

  /// Throws ValidationError unless samples >= 1 and 0 < floor_eps < 1e-3.
  void validate() const;
};

/// Monte Carlo orthant estimate and its partials. d_score is with respect to
/// the score inside Phi (g_r for MC^r, g_o for MC^o); the score inside the
/// indicator is not differentiated.
struct McEstimate {
  double value = 0.0;
  double d_score = 0.0;
  double d_rho = 0.0;
};

/// Stream that supplies the epsilon draws of one pair in one epoch.
RngStream pair_stream(const MCConfig& cfg, std::uint64_t epoch, std::uint64_t pair_key);

/// log f(z > 0, y) for an observed continuous preference, including the
/// -log sqrt(2 pi) constant. Requires |rho| < 1.
LikelihoodTerm cont_obs_term(double y, double g_o, double g_r, double rho);
/// log Phi(-g_o) for an unobserved pair.
LikelihoodTerm cont_mis_term(double g_o);

/// MC^r = mean_l Phi((g_r + rho eps_l)/sqrt(1-rho^2)) 1{eps_l > -g_o}.
McEstimate mc_joint_pos_r(double g_o, double g_r, double rho, std::span<const double> eps);
McEstimate mc_joint_pos_r(double g_o, double g_r, double rho, const MCConfig& cfg,
                          RngStream stream);
/// MC^o: the same estimator with the roles of g_o and g_r exchanged.
McEstimate mc_joint_pos_o(double g_o, double g_r, double rho, std::span<const double> eps);
McEstimate mc_joint_pos_o(double g_o, double g_r, double rho, const MCConfig& cfg,
                          RngStream stream);

/// Observed-pair term of the prediction-phase objective. Throws
/// ValidationError for o = 0. d_go is the derivative through Phi(g_o) only
/// (the indicator is piecewise constant); the training loop discards it.
LikelihoodTerm binary_term_R(bool o, bool r, double g_o, double g_r, double rho,
                             const MCConfig& cfg, std::span<const double> eps);
LikelihoodTerm binary_term_R(bool o, bool r, double g_o, double g_r, double rho,
                             const MCConfig& cfg, RngStream stream);

/// Selection-phase term: MC^o for observed pairs, log Phi(-g_o) otherwise.
/// d_gr is identically zero (g_r only enters through the indicator).
LikelihoodTerm binary_term_D(bool o, bool r, double g_o, double g_r, double rho,
                             const MCConfig& cfg, std::span<const double> eps);
LikelihoodTerm binary_term_D(bool o, bool r, double g_o, double g_r, double rho,
                             const MCConfig& cfg, RngStream stream);

enum class LikelihoodMode { continuous, binary_r, binary_d };

struct JointGrads {
  GradBuffer o;
  GradBuffer r;
  double rho_raw = 0.0;

  JointGrads() = default;
  JointGrads(const ScoreModel& model_o, const ScoreModel& model_r)
      : o(model_o.make_grad()), r(model_r.make_grad()) {}
  void zero();
};

/// Sums the per-pair log-likelihood terms over the slice. When grads is
/// non-null, grad_scale * d(total) is accumulated: d_go into grads->o,
/// d_gr into grads->r, d_rho through tanh into grads->rho_raw. binary_r
/// updates only (r, rho), binary_d only (o, rho). MC draws come from
/// pair_stream(cfg, epoch, pair.key).
double batch_loglik(std::span<const PairSample> slice, LabelKind labels,
                    const ScoreModel& model_o, const ScoreModel& model_r,
                    const CorrelationParam& corr, LikelihoodMode mode, const MCConfig& cfg,
                    std::uint64_t epoch, JointGrads* grads, double grad_scale = 1.0);

}  // namespace exoc
