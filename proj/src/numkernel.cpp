#include "exoc/numkernel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "cody_normal.hpp"
#include "exoc/error.hpp"
#include "exoc/kernels.hpp"

namespace exoc {
namespace {

namespace cody = detail::cody;

// Rational part of Cody's tail branches for y = |x| > 0.67448975:
// Phi(-y) = exp(-y^2/2) * tail_factor(y).
double tail_factor(double y) {
  if (y <= cody::kSplitTail) {
    double num = cody::c[8] * y;
    double den = y;
    for (int i = 0; i < 7; ++i) {
      num = (num + cody::c[i]) * y;
      den = (den + cody::d[i]) * y;
    }
    return (num + cody::c[7]) / (den + cody::d[7]);
  }
  const double xsq = 1.0 / (y * y);
  double num = cody::p[5] * xsq;
  double den = xsq;
  for (int i = 0; i < 4; ++i) {
    num = (num + cody::p[i]) * xsq;
    den = (den + cody::q[i]) * xsq;
  }
  const double t = xsq * (num + cody::p[4]) / (den + cody::q[4]);
  return (kInvSqrt2Pi - t) / y;
}

// exp(-y^2/2) split so the large square does not lose low-order bits.
double gauss_factor(double y) {
  const double ysq = std::trunc(y * 16.0) / 16.0;
  const double del = (y - ysq) * (y + ysq);
  return std::exp(-ysq * ysq * 0.5) * std::exp(-del * 0.5);
}

double central(double x) {
  const double xsq = x * x;
  double num = cody::a[4] * xsq;
  double den = xsq;
  for (int i = 0; i < 3; ++i) {
    num = (num + cody::a[i]) * xsq;
    den = (den + cody::b[i]) * xsq;
  }
  return x * (num + cody::a[3]) / (den + cody::b[3]);
}

// Lower tail Phi(-y) for y >= 0.
double lower_tail(double y) {
  if (y <= cody::kSplitCentral) return 0.5 - central(y);
  if (y >= cody::kUnderflow) return 0.0;
  return gauss_factor(y) * tail_factor(y);
}

std::uint64_t splitmix(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

double std_normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

double std_normal_cdf(double x) {
  if (std::isnan(x)) return x;
  const double y = std::fabs(x);
  const double tail = lower_tail(y);
  return x > 0 ? 1.0 - tail : tail;
}

double log_std_normal_cdf(double x) {
  if (x > 0) return std::log1p(-lower_tail(x));
  const double y = -x;
  if (y > cody::kSplitTail) return -0.5 * y * y + std::log(tail_factor(y));
  return std::log(lower_tail(y));
}

double inverse_mills(double x) {
  if (x < -cody::kSplitTail) return kInvSqrt2Pi / tail_factor(-x);
  return std_normal_pdf(x) / std_normal_cdf(x);
}

std::uint64_t mix_keys(std::uint64_t a, std::uint64_t b) {
  return splitmix(splitmix(a) ^ (b + 0x632BE59BD9B4E019ULL));
}

std::uint64_t mix_keys(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_keys(mix_keys(a, b), c);
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_(stream_id), key_(mix_keys(seed, stream_id)) {}

RngStream RngStream::substream(std::uint64_t id) const {
  return RngStream(seed_, mix_keys(stream_, id));
}

std::uint64_t RngStream::next_u64() {
  // SplitMix64 over a keyed counter: the output at position c depends only
  // on (key, c).
  return splitmix(key_ + (counter_++) * 0x9E3779B97F4A7C15ULL);
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t RngStream::below(std::uint64_t bound) {
  // Lemire's multiply-shift with rejection.
  std::uint64_t x = next_u64();
  __uint128_t m = static_cast<__uint128_t>(x) * bound;
  auto low = static_cast<std::uint64_t>(m);
  if (low < bound) {
    const std::uint64_t threshold = (0 - bound) % bound;
    while (low < threshold) {
      x = next_u64();
      m = static_cast<__uint128_t>(x) * bound;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

void RngStream::fill_normal(std::span<double> out) {
  std::size_t i = 0;
  if (has_spare_ && !out.empty()) out[i++] = normal();
  const std::size_t rest = out.size() - i;
  if (rest == 0) return;
  const std::size_t pairs = (rest + 1) / 2;
  thread_local std::vector<double> u;
  thread_local std::vector<double> z;
  u.resize(2 * pairs);
  z.resize(2 * pairs);
  for (std::size_t p = 0; p < pairs; ++p) {
    u[2 * p] = 1.0 - uniform();
    u[2 * p + 1] = uniform();
  }
  kernels::box_muller(u, z);
  std::copy_n(z.begin(), rest, out.begin() + static_cast<std::ptrdiff_t>(i));
  if (rest % 2 == 1) {
    spare_ = z[2 * pairs - 1];
    has_spare_ = true;
  }
}

BivariateSample sample_bivariate(double rho, RngStream& rng) {
  if (!(std::fabs(rho) < 1.0)) {
    throw ValidationError("sample_bivariate: |rho| must be < 1, got " + std::to_string(rho));
  }
  const double eps = rng.normal();
  const double eta = rng.normal();
  return {eps, rho * eps + std::sqrt(1.0 - rho * rho) * eta};
}

double bivariate_normal_pdf(double u, double v, double rho) {
  const double one_minus = 1.0 - rho * rho;
  const double quad = (u * u - 2.0 * rho * u * v + v * v) / one_minus;
  return std::exp(-0.5 * quad) / (2.0 * std::numbers::pi * std::sqrt(one_minus));
}

namespace {

struct SimpsonState {
  const std::function<double(double)>& f;
  std::size_t evals = 0;
  std::size_t max_evals;
  int max_depth;
};

double simpson_step(SimpsonState& st, double a, double b, double fa, double fm, double fb,
                    double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = st.f(lm);
  const double frm = st.f(rm);
  st.evals += 2;
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (std::fabs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  if (depth >= st.max_depth || st.evals >= st.max_evals) {
    throw NumericError("adaptive Simpson failed to converge within the refinement budget");
  }
  return simpson_step(st, a, m, fa, flm, fm, left, 0.5 * tol, depth + 1) +
         simpson_step(st, m, b, fm, frm, fb, right, 0.5 * tol, depth + 1);
}

}  // namespace

double integrate_adaptive_simpson(const std::function<double(double)>& f, double lo, double hi,
                                  const QuadratureOptions& opts) {
  if (!(hi > lo)) return 0.0;
  // Fixed initial panels so narrow features between the first five nodes are
  // not skipped by the error estimate.
  constexpr int kPanels = 16;
  SimpsonState st{f, 0, opts.max_evaluations, opts.max_depth};
  const double width = (hi - lo) / kPanels;
  double total = 0.0;
  for (int k = 0; k < kPanels; ++k) {
    const double a = lo + k * width;
    const double b = (k + 1 == kPanels) ? hi : a + width;
    const double fa = f(a);
    const double fb = f(b);
    const double fm = f(0.5 * (a + b));
    st.evals += 3;
    const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    total += simpson_step(st, a, b, fa, fm, fb, whole, opts.abs_tol / kPanels, 0);
  }
  return total;
}

namespace {

constexpr double kTruncation = 10.0;

void check_orthant_args(double g_o, double g_r, double rho) {
  if (!(std::fabs(rho) <= 0.999)) {
    throw ValidationError("orthant quadrature requires |rho| <= 0.999");
  }
  if (!std::isfinite(g_o) || !std::isfinite(g_r)) {
    throw ValidationError("orthant quadrature requires finite scores");
  }
}

double orthant_integral(double g_o, double rho, double lo, double hi,
                        const QuadratureOptions& opts) {
  lo = std::max(lo, -kTruncation);
  hi = std::min(hi, kTruncation);
  if (!(hi > lo)) return 0.0;
  const double inv_s = 1.0 / std::sqrt(1.0 - rho * rho);
  auto integrand = [&](double p) {
    return std_normal_cdf((g_o + rho * p) * inv_s) * std_normal_pdf(p);
  };
  return integrate_adaptive_simpson(integrand, lo, hi, opts);
}

}  // namespace

double orthant_prob_quadrature(double g_o, double g_r, double rho, const QuadratureOptions& opts) {
  check_orthant_args(g_o, g_r, rho);
  return std::clamp(orthant_integral(g_o, rho, -g_r, kTruncation, opts), 0.0,
                    std_normal_cdf(g_o));
}

double orthant_prob_quadrature_complement(double g_o, double g_r, double rho,
                                          const QuadratureOptions& opts) {
  check_orthant_args(g_o, g_r, rho);
  return std::clamp(orthant_integral(g_o, rho, -kTruncation, -g_r, opts), 0.0,
                    std_normal_cdf(g_o));
}

}  // namespace exoc
