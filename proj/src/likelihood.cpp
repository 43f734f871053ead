#include "exoc/likelihood.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "exoc/error.hpp"
#include "exoc/kernels.hpp"

namespace exoc {

void MCConfig::validate() const {
  if (samples < 1) throw ValidationError("Monte Carlo sample count must be >= 1");
  if (!(floor_eps > 0.0 && floor_eps < 1e-3)) {
    throw ValidationError("probability floor must lie in (0, 1e-3)");
  }
}

RngStream pair_stream(const MCConfig& cfg, std::uint64_t epoch, std::uint64_t pair_key) {
  return RngStream(cfg.seed, mix_keys(0x4D43ULL, epoch, pair_key));
}

namespace {

void check_rho(double rho) {
  if (!(std::fabs(rho) < 1.0)) throw ValidationError("correlation must satisfy |rho| < 1");
}

std::vector<double>& scratch(std::size_t n) {
  thread_local std::vector<double> buf;
  buf.resize(n);
  return buf;
}

std::span<const double> draw(const MCConfig& cfg, RngStream& stream) {
  auto& buf = scratch(cfg.samples);
  stream.fill_normal(buf);
  return buf;
}

// Shared body of MC^r / MC^o: the score inside Phi is `inner`, the one in
// the indicator is `gate`.
McEstimate mc_estimate(double inner, double gate, double rho, std::span<const double> eps) {
  check_rho(rho);
  if (eps.empty()) throw ValidationError("Monte Carlo estimate needs at least one sample");
  const double s = std::sqrt(1.0 - rho * rho);
  const kernels::McMoments m = kernels::mc_moments(eps, inner, rho, -gate);
  const double inv_l = 1.0 / static_cast<double>(eps.size());
  // dt/dinner = 1/s, dt/drho = eps/s + t rho / s^2.
  return {m.cdf * inv_l, m.pdf / s * inv_l, (m.pdf_eps / s + rho * m.pdf_t / (s * s)) * inv_l};
}

// log(max(p, floor)) with gradient factor 1/p, or zero once clamped.
struct ClampedLog {
  double value;
  double inv;
};

ClampedLog clamped_log(double p, double floor_eps) {
  if (p > floor_eps) return {std::log(p), 1.0 / p};
  return {std::log(floor_eps), 0.0};
}

LikelihoodTerm observed_binary(bool r, double g_o, const McEstimate& mc, double floor_eps,
                               bool score_is_go) {
  LikelihoodTerm t;
  if (r) {
    const auto l = clamped_log(mc.value, floor_eps);
    t.value = l.value;
    const double d_score = mc.d_score * l.inv;
    (score_is_go ? t.d_go : t.d_gr) = d_score;
    t.d_rho = mc.d_rho * l.inv;
    return t;
  }
  const auto l = clamped_log(std_normal_cdf(g_o) - mc.value, floor_eps);
  t.value = l.value;
  const double pdf_go = std_normal_pdf(g_o);
  if (score_is_go) {
    t.d_go = (pdf_go - mc.d_score) * l.inv;
  } else {
    t.d_go = pdf_go * l.inv;
    t.d_gr = -mc.d_score * l.inv;
  }
  t.d_rho = -mc.d_rho * l.inv;
  return t;
}

}  // namespace

LikelihoodTerm cont_obs_term(double y, double g_o, double g_r, double rho) {
  check_rho(rho);
  const double s = std::sqrt(1.0 - rho * rho);
  const double e = y - g_r;
  const double u = (g_o + rho * e) / s;
  const double lam = inverse_mills(u);
  LikelihoodTerm t;
  t.value = -0.5 * e * e - kLogSqrt2Pi + log_std_normal_cdf(u);
  t.d_go = lam / s;
  t.d_gr = e - lam * rho / s;
  t.d_rho = lam * (e / s + u * rho / (s * s));
  return t;
}

LikelihoodTerm cont_mis_term(double g_o) {
  LikelihoodTerm t;
  t.value = log_std_normal_cdf(-g_o);
  t.d_go = -inverse_mills(-g_o);
  return t;
}

McEstimate mc_joint_pos_r(double g_o, double g_r, double rho, std::span<const double> eps) {
  return mc_estimate(g_r, g_o, rho, eps);
}

McEstimate mc_joint_pos_r(double g_o, double g_r, double rho, const MCConfig& cfg,
                          RngStream stream) {
  cfg.validate();
  return mc_joint_pos_r(g_o, g_r, rho, draw(cfg, stream));
}

McEstimate mc_joint_pos_o(double g_o, double g_r, double rho, std::span<const double> eps) {
  return mc_estimate(g_o, g_r, rho, eps);
}

McEstimate mc_joint_pos_o(double g_o, double g_r, double rho, const MCConfig& cfg,
                          RngStream stream) {
  cfg.validate();
  return mc_joint_pos_o(g_o, g_r, rho, draw(cfg, stream));
}

LikelihoodTerm binary_term_R(bool o, bool r, double g_o, double g_r, double rho,
                             const MCConfig& cfg, std::span<const double> eps) {
  if (!o) throw ValidationError("prediction-phase likelihood is defined on observed pairs only");
  return observed_binary(r, g_o, mc_joint_pos_r(g_o, g_r, rho, eps), cfg.floor_eps, false);
}

LikelihoodTerm binary_term_R(bool o, bool r, double g_o, double g_r, double rho,
                             const MCConfig& cfg, RngStream stream) {
  cfg.validate();
  if (!o) throw ValidationError("prediction-phase likelihood is defined on observed pairs only");
  return binary_term_R(o, r, g_o, g_r, rho, cfg, draw(cfg, stream));
}

LikelihoodTerm binary_term_D(bool o, bool r, double g_o, double g_r, double rho,
                             const MCConfig& cfg, std::span<const double> eps) {
  check_rho(rho);
  if (!o) return cont_mis_term(g_o);
  return observed_binary(r, g_o, mc_joint_pos_o(g_o, g_r, rho, eps), cfg.floor_eps, true);
}

LikelihoodTerm binary_term_D(bool o, bool r, double g_o, double g_r, double rho,
                             const MCConfig& cfg, RngStream stream) {
  cfg.validate();
  check_rho(rho);
  if (!o) return cont_mis_term(g_o);
  return binary_term_D(o, r, g_o, g_r, rho, cfg, draw(cfg, stream));
}

void JointGrads::zero() {
  o.zero();
  r.zero();
  rho_raw = 0.0;
}

double batch_loglik(std::span<const PairSample> slice, LabelKind labels,
                    const ScoreModel& model_o, const ScoreModel& model_r,
                    const CorrelationParam& corr, LikelihoodMode mode, const MCConfig& cfg,
                    std::uint64_t epoch, JointGrads* grads, double grad_scale) {
  const bool want_binary = mode != LikelihoodMode::continuous;
  if (want_binary != (labels == LabelKind::binary)) {
    throw ValidationError(std::string("likelihood mode does not match ") +
                          label_kind_name(labels) + " labels");
  }
  if (want_binary) cfg.validate();
  const double rho = corr.value();
  const double jac = corr.jacobian();
  double total = 0.0;
  for (const PairSample& s : slice) {
    if (mode == LikelihoodMode::binary_r && !s.observed) {
      throw ValidationError("prediction-phase batch contains an unobserved pair");
    }
    if (want_binary && s.observed && s.label != 0.0 && s.label != 1.0) {
      throw ValidationError("binary likelihood needs 0/1 labels");
    }
    const ScoreInput in_o = input_for(model_o, s);
    const double g_o = model_o.score(in_o);
    // Unobserved pairs never touch the prediction head.
    const bool needs_r = s.observed;
    const ScoreInput in_r = input_for(model_r, s);
    const double g_r = needs_r ? model_r.score(in_r) : 0.0;

    LikelihoodTerm t;
    switch (mode) {
      case LikelihoodMode::continuous:
        t = s.observed ? cont_obs_term(s.label, g_o, g_r, rho) : cont_mis_term(g_o);
        break;
      case LikelihoodMode::binary_r: {
        RngStream st = pair_stream(cfg, epoch, s.key);
        t = binary_term_R(true, s.label == 1.0, g_o, g_r, rho, cfg, draw(cfg, st));
        t.d_go = 0.0;
        break;
      }
      case LikelihoodMode::binary_d: {
        if (s.observed) {
          RngStream st = pair_stream(cfg, epoch, s.key);
          t = binary_term_D(true, s.label == 1.0, g_o, g_r, rho, cfg, draw(cfg, st));
        } else {
          t = cont_mis_term(g_o);
        }
        t.d_gr = 0.0;
        break;
      }
    }
    if (!std::isfinite(t.value)) {
      throw NumericError("non-finite log-likelihood term at pair (" +
                         std::to_string(s.pair.user) + ", " + std::to_string(s.pair.item) + ")");
    }
    total += t.value;
    if (grads != nullptr) {
      if (t.d_go != 0.0) model_o.accumulate_grad(in_o, grad_scale * t.d_go, grads->o);
      if (t.d_gr != 0.0) model_r.accumulate_grad(in_r, grad_scale * t.d_gr, grads->r);
      grads->rho_raw += grad_scale * t.d_rho * jac;
    }
  }
  return total;
}

}  // namespace exoc
