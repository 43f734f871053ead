#pragma once

#include <cstdint>
#include <functional>
#include <span>

namespace exoc {

inline constexpr double kInvSqrt2Pi = 0.398942280401432677939946059934;
inline constexpr double kLogSqrt2Pi = 0.918938533204672741780329736406;

/// Standard normal density.
double std_normal_pdf(double x);

/// Standard normal CDF. Cody's rational Chebyshev approximation, relative
/// error below 1e-15 over the whole double range.
double std_normal_cdf(double x);

/// log(Phi(x)) without underflow. Below x = -6 the lower tail is evaluated
/// as -x^2/2 + log(R(x)) where R is the rational Mills-ratio expansion, so
/// the result stays finite for any finite x.
double log_std_normal_cdf(double x);

/// phi(x) / Phi(x), the inverse Mills ratio, stable in both tails.
double inverse_mills(double x);

// Counter-based random stream. Every draw is a pure function of
// (seed, stream, counter), so two streams built from the same pair produce
// identical sequences on any platform.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

  /// Independent child stream; derivation is deterministic in (this, id).
  RngStream substream(std::uint64_t id) const;

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller; the paired draw is cached.
  double normal();
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  void fill_normal(std::span<double> out);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Mixes several 64-bit words into one stream id.
std::uint64_t mix_keys(std::uint64_t a, std::uint64_t b);
std::uint64_t mix_keys(std::uint64_t a, std::uint64_t b, std::uint64_t c);

struct BivariateSample {
  double eps;    // selection noise U_O
  double delta;  // preference noise U_R
};

/// Draws (U_O, U_R) with unit variances and correlation rho. Throws
/// ValidationError when |rho| >= 1.
BivariateSample sample_bivariate(double rho, RngStream& rng);

/// Bivariate normal density with unit variances and correlation rho.
double bivariate_normal_pdf(double u, double v, double rho);

struct QuadratureOptions {
  double abs_tol = 1e-10;
  int max_depth = 50;
  std::size_t max_evaluations = 2'000'000;
};

/// Adaptive Simpson on [lo, hi] with interval halving and Richardson
/// correction. Throws NumericError if the refinement budget runs out.
double integrate_adaptive_simpson(const std::function<double(double)>& f, double lo,
                                  double hi, const QuadratureOptions& opts = {});

/// P(g_o + U_O > 0, g_r + U_R > 0) written as the integral over the U_R
/// draw p > -g_r of Phi((g_o + rho p) / sqrt(1 - rho^2)) phi(p).
/// Requires |rho| <= 0.999.
double orthant_prob_quadrature(double g_o, double g_r, double rho,
                               const QuadratureOptions& opts = {});

/// Same integrand over p <= -g_r, i.e. P(z > 0, y <= 0).
double orthant_prob_quadrature_complement(double g_o, double g_r, double rho,
                                          const QuadratureOptions& opts = {});

}  // namespace exoc
