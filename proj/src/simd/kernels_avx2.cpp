// AVX2 + FMA variants. This translation unit is compiled with -mavx2 -mfma
// and must only be entered after the dispatcher has checked the CPU.

#include <immintrin.h>

#include <cmath>

#include "../cody_normal.hpp"
#include "exoc/kernels.hpp"
#include "exoc/numkernel.hpp"

namespace exoc::kernels::avx2 {
namespace {

namespace cody = detail::cody;

inline __m256d set1(double v) { return _mm256_set1_pd(v); }

// Cephes-style exp: 2^n * (1 + 2 P(r) / (Q(r) - P(r))), |r| <= ln2/2.
// Inputs are clamped to the normal-result range.
inline __m256d exp_pd(__m256d x) {
  x = _mm256_min_pd(x, set1(709.0));
  x = _mm256_max_pd(x, set1(-708.39));
  const __m256d fx =
      _mm256_round_pd(_mm256_mul_pd(x, set1(1.4426950408889634073599)),
                      _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  x = _mm256_fnmadd_pd(fx, set1(6.93145751953125e-1), x);
  x = _mm256_fnmadd_pd(fx, set1(1.42860682030941723212e-6), x);
  const __m256d xx = _mm256_mul_pd(x, x);
  __m256d px = _mm256_fmadd_pd(set1(1.26177193074810590878e-4), xx,
                               set1(3.02994407707441961300e-2));
  px = _mm256_fmadd_pd(px, xx, set1(9.99999999999999999910e-1));
  px = _mm256_mul_pd(px, x);
  __m256d qx = _mm256_fmadd_pd(set1(3.00198505138664455042e-6), xx,
                               set1(2.52448340349684104192e-3));
  qx = _mm256_fmadd_pd(qx, xx, set1(2.27265548208155028766e-1));
  qx = _mm256_fmadd_pd(qx, xx, set1(2.00000000000000000009e0));
  __m256d r = _mm256_div_pd(px, _mm256_sub_pd(qx, px));
  r = _mm256_fmadd_pd(set1(2.0), r, set1(1.0));
  __m256i n = _mm256_cvtepi32_epi64(_mm256_cvtpd_epi32(fx));
  n = _mm256_slli_epi64(_mm256_add_epi64(n, _mm256_set1_epi64x(1023)), 52);
  return _mm256_mul_pd(r, _mm256_castsi256_pd(n));
}

// Cephes log for positive normal inputs: x = m 2^e with m in [sqrt(1/2),
// sqrt(2)), log(1 + f) = f - f^2/2 + f^3 P(f)/Q(f).
inline __m256d log_pd(__m256d x) {
  const __m256i bits = _mm256_castpd_si256(x);
  const __m256i exp_bits = _mm256_srli_epi64(bits, 52);
  // Small integers converted through the 2^52 magic constant.
  const __m256d magic = set1(4503599627370496.0);
  __m256d e = _mm256_sub_pd(
      _mm256_castsi256_pd(_mm256_or_si256(exp_bits, _mm256_castpd_si256(magic))), magic);
  e = _mm256_sub_pd(e, set1(1022.0));
  __m256d m = _mm256_castsi256_pd(_mm256_or_si256(
      _mm256_and_si256(bits, _mm256_set1_epi64x(0x000FFFFFFFFFFFFFLL)),
      _mm256_set1_epi64x(0x3FE0000000000000LL)));
  const __m256d small = _mm256_cmp_pd(m, set1(0.70710678118654752440), _CMP_LT_OQ);
  e = _mm256_sub_pd(e, _mm256_and_pd(small, set1(1.0)));
  const __m256d f = _mm256_sub_pd(_mm256_add_pd(m, _mm256_and_pd(small, m)), set1(1.0));
  const __m256d z = _mm256_mul_pd(f, f);
  __m256d p = set1(1.01875663804580931796e-4);
  p = _mm256_fmadd_pd(p, f, set1(4.97494994976747001425e-1));
  p = _mm256_fmadd_pd(p, f, set1(4.70579119878881725854e0));
  p = _mm256_fmadd_pd(p, f, set1(1.44989225341610930846e1));
  p = _mm256_fmadd_pd(p, f, set1(1.79368678507819816313e1));
  p = _mm256_fmadd_pd(p, f, set1(7.70838733755885391666e0));
  __m256d q = _mm256_add_pd(f, set1(1.12873587189167450590e1));
  q = _mm256_fmadd_pd(q, f, set1(4.52279145837532221105e1));
  q = _mm256_fmadd_pd(q, f, set1(8.29875266912776603211e1));
  q = _mm256_fmadd_pd(q, f, set1(7.11544750618563894466e1));
  q = _mm256_fmadd_pd(q, f, set1(2.31251620126765340583e1));
  __m256d y = _mm256_mul_pd(_mm256_mul_pd(f, z), _mm256_div_pd(p, q));
  y = _mm256_fnmadd_pd(e, set1(2.121944400546905827679e-4), y);
  y = _mm256_fnmadd_pd(set1(0.5), z, y);
  __m256d r = _mm256_add_pd(f, y);
  return _mm256_fmadd_pd(e, set1(0.693359375), r);
}

// sin and cos of 2 pi u for u in [0, 1): quadrant reduction on u itself
// (exact), then Cephes minimax polynomials on [-pi/4, pi/4].
inline void sincos_2pi_pd(__m256d u, __m256d* sin_out, __m256d* cos_out) {
  const __m256d qd =
      _mm256_round_pd(_mm256_mul_pd(u, set1(4.0)), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  const __m256d a = _mm256_mul_pd(_mm256_fnmadd_pd(qd, set1(0.25), u),
                                  set1(6.28318530717958647692));
  const __m256d a2 = _mm256_mul_pd(a, a);
  __m256d sp = set1(1.58962301576546568060e-10);
  sp = _mm256_fmadd_pd(sp, a2, set1(-2.50507477628578072866e-8));
  sp = _mm256_fmadd_pd(sp, a2, set1(2.75573136213857245213e-6));
  sp = _mm256_fmadd_pd(sp, a2, set1(-1.98412698295895385996e-4));
  sp = _mm256_fmadd_pd(sp, a2, set1(8.33333333332211858878e-3));
  sp = _mm256_fmadd_pd(sp, a2, set1(-1.66666666666666307295e-1));
  const __m256d s = _mm256_fmadd_pd(_mm256_mul_pd(a, a2), sp, a);
  __m256d cp = set1(-1.13585365213876817300e-11);
  cp = _mm256_fmadd_pd(cp, a2, set1(2.08757008419747316778e-9));
  cp = _mm256_fmadd_pd(cp, a2, set1(-2.75573141792967388112e-7));
  cp = _mm256_fmadd_pd(cp, a2, set1(2.48015872888517045348e-5));
  cp = _mm256_fmadd_pd(cp, a2, set1(-1.38888888888730564116e-3));
  cp = _mm256_fmadd_pd(cp, a2, set1(4.16666666666665929218e-2));
  const __m256d c = _mm256_fmadd_pd(_mm256_mul_pd(a2, a2), cp,
                                    _mm256_fnmadd_pd(set1(0.5), a2, set1(1.0)));
  const __m256i q = _mm256_cvtepi32_epi64(_mm256_cvtpd_epi32(qd));
  const __m256d swap = _mm256_castsi256_pd(
      _mm256_cmpeq_epi64(_mm256_and_si256(q, _mm256_set1_epi64x(1)), _mm256_set1_epi64x(1)));
  const __m256d neg_sin = _mm256_castsi256_pd(
      _mm256_slli_epi64(_mm256_and_si256(q, _mm256_set1_epi64x(2)), 62));
  const __m256d neg_cos = _mm256_castsi256_pd(_mm256_slli_epi64(
      _mm256_and_si256(_mm256_add_epi64(q, _mm256_set1_epi64x(1)), _mm256_set1_epi64x(2)), 62));
  *sin_out = _mm256_xor_pd(_mm256_blendv_pd(s, c, swap), neg_sin);
  *cos_out = _mm256_xor_pd(_mm256_blendv_pd(c, s, swap), neg_cos);
}

inline __m256d abs_pd(__m256d x) { return _mm256_andnot_pd(set1(-0.0), x); }

inline __m256d normal_pdf_pd(__m256d t) {
  return _mm256_mul_pd(set1(kInvSqrt2Pi), exp_pd(_mm256_mul_pd(set1(-0.5), _mm256_mul_pd(t, t))));
}

// Branch-free Cody CDF: all three rational forms are evaluated and blended.
inline __m256d normal_cdf_pd(__m256d x) {
  const __m256d y = abs_pd(x);

  const __m256d xsq = _mm256_mul_pd(x, x);
  __m256d num = _mm256_mul_pd(set1(cody::a[4]), xsq);
  __m256d den = xsq;
  for (int i = 0; i < 3; ++i) {
    num = _mm256_mul_pd(_mm256_add_pd(num, set1(cody::a[i])), xsq);
    den = _mm256_mul_pd(_mm256_add_pd(den, set1(cody::b[i])), xsq);
  }
  const __m256d central = _mm256_add_pd(
      set1(0.5), _mm256_div_pd(_mm256_mul_pd(x, _mm256_add_pd(num, set1(cody::a[3]))),
                               _mm256_add_pd(den, set1(cody::b[3]))));

  num = _mm256_mul_pd(set1(cody::c[8]), y);
  den = y;
  for (int i = 0; i < 7; ++i) {
    num = _mm256_mul_pd(_mm256_add_pd(num, set1(cody::c[i])), y);
    den = _mm256_mul_pd(_mm256_add_pd(den, set1(cody::d[i])), y);
  }
  const __m256d mid = _mm256_div_pd(_mm256_add_pd(num, set1(cody::c[7])),
                                    _mm256_add_pd(den, set1(cody::d[7])));

  const __m256d ysafe = _mm256_max_pd(y, set1(1.0));
  const __m256d isq = _mm256_div_pd(set1(1.0), _mm256_mul_pd(ysafe, ysafe));
  num = _mm256_mul_pd(set1(cody::p[5]), isq);
  den = isq;
  for (int i = 0; i < 4; ++i) {
    num = _mm256_mul_pd(_mm256_add_pd(num, set1(cody::p[i])), isq);
    den = _mm256_mul_pd(_mm256_add_pd(den, set1(cody::q[i])), isq);
  }
  __m256d far = _mm256_div_pd(_mm256_mul_pd(isq, _mm256_add_pd(num, set1(cody::p[4]))),
                              _mm256_add_pd(den, set1(cody::q[4])));
  far = _mm256_div_pd(_mm256_sub_pd(set1(kInvSqrt2Pi), far), ysafe);

  const __m256d use_far = _mm256_cmp_pd(y, set1(cody::kSplitTail), _CMP_GT_OQ);
  const __m256d factor = _mm256_blendv_pd(mid, far, use_far);

  const __m256d ytr =
      _mm256_mul_pd(_mm256_round_pd(_mm256_mul_pd(y, set1(16.0)),
                                    _MM_FROUND_TO_ZERO | _MM_FROUND_NO_EXC),
                    set1(0.0625));
  const __m256d del = _mm256_mul_pd(_mm256_sub_pd(y, ytr), _mm256_add_pd(y, ytr));
  const __m256d gauss =
      _mm256_mul_pd(exp_pd(_mm256_mul_pd(set1(-0.5), _mm256_mul_pd(ytr, ytr))),
                    exp_pd(_mm256_mul_pd(set1(-0.5), del)));
  __m256d tail = _mm256_mul_pd(gauss, factor);
  tail = _mm256_andnot_pd(_mm256_cmp_pd(y, set1(cody::kUnderflow), _CMP_GE_OQ), tail);

  const __m256d positive = _mm256_cmp_pd(x, _mm256_setzero_pd(), _CMP_GT_OQ);
  const __m256d outer = _mm256_blendv_pd(tail, _mm256_sub_pd(set1(1.0), tail), positive);
  const __m256d is_central = _mm256_cmp_pd(y, set1(cody::kSplitCentral), _CMP_LE_OQ);
  return _mm256_blendv_pd(outer, central, is_central);
}

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

}  // namespace

McMoments mc_moments(std::span<const double> eps, double shift, double rho, double threshold) {
  const double inv_s_scalar = 1.0 / std::sqrt(1.0 - rho * rho);
  const __m256d inv_s = set1(inv_s_scalar);
  const __m256d vshift = set1(shift);
  const __m256d vrho = set1(rho);
  const __m256d vthr = set1(threshold);
  __m256d acc_c = _mm256_setzero_pd();
  __m256d acc_d = _mm256_setzero_pd();
  __m256d acc_de = _mm256_setzero_pd();
  __m256d acc_dt = _mm256_setzero_pd();
  const std::size_t n = eps.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d e = _mm256_loadu_pd(eps.data() + i);
    const __m256d keep = _mm256_cmp_pd(e, vthr, _CMP_GT_OQ);
    const __m256d t = _mm256_mul_pd(_mm256_fmadd_pd(vrho, e, vshift), inv_s);
    const __m256d c = _mm256_and_pd(normal_cdf_pd(t), keep);
    const __m256d d = _mm256_and_pd(normal_pdf_pd(t), keep);
    acc_c = _mm256_add_pd(acc_c, c);
    acc_d = _mm256_add_pd(acc_d, d);
    acc_de = _mm256_fmadd_pd(d, e, acc_de);
    acc_dt = _mm256_fmadd_pd(d, t, acc_dt);
  }
  McMoments m{hsum(acc_c), hsum(acc_d), hsum(acc_de), hsum(acc_dt)};
  for (; i < n; ++i) {
    const double e = eps[i];
    if (!(e > threshold)) continue;
    const double t = (shift + rho * e) * inv_s_scalar;
    const double dens = std_normal_pdf(t);
    m.cdf += std_normal_cdf(t);
    m.pdf += dens;
    m.pdf_eps += dens * e;
    m.pdf_t += dens * t;
  }
  return m;
}

void normal_cdf(std::span<const double> x, std::span<double> out) {
  const std::size_t n = x.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out.data() + i, normal_cdf_pd(_mm256_loadu_pd(x.data() + i)));
  }
  for (; i < n; ++i) out[i] = std_normal_cdf(x[i]);
}

void exp(std::span<const double> x, std::span<double> out) {
  const std::size_t n = x.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out.data() + i, exp_pd(_mm256_loadu_pd(x.data() + i)));
  }
  for (; i < n; ++i) out[i] = std::exp(x[i]);
}

void log(std::span<const double> x, std::span<double> out) {
  const std::size_t n = x.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x.data() + i);
    // Zero, subnormal, negative, infinite and NaN lanes go through libm.
    const __m256d ok = _mm256_and_pd(_mm256_cmp_pd(v, set1(0x1.0p-1022), _CMP_GE_OQ),
                                     _mm256_cmp_pd(v, set1(0x1.fffffffffffffp+1023), _CMP_LE_OQ));
    if (_mm256_movemask_pd(ok) == 0xF) {
      _mm256_storeu_pd(out.data() + i, log_pd(v));
    } else {
      for (std::size_t j = i; j < i + 4; ++j) out[j] = std::log(x[j]);
    }
  }
  for (; i < n; ++i) out[i] = std::log(x[i]);
}

void box_muller(std::span<const double> u, std::span<double> out) {
  const std::size_t n = u.size();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    // Lanes hold pairs in the order (0, 2, 1, 3); unpacking restores it.
    const __m256d a = _mm256_loadu_pd(u.data() + i);
    const __m256d b = _mm256_loadu_pd(u.data() + i + 4);
    const __m256d u1 = _mm256_unpacklo_pd(a, b);
    const __m256d u2 = _mm256_unpackhi_pd(a, b);
    const __m256d r = _mm256_sqrt_pd(_mm256_mul_pd(set1(-2.0), log_pd(u1)));
    __m256d sn;
    __m256d cs;
    sincos_2pi_pd(u2, &sn, &cs);
    sn = _mm256_mul_pd(r, sn);
    cs = _mm256_mul_pd(r, cs);
    _mm256_storeu_pd(out.data() + i, _mm256_unpacklo_pd(cs, sn));
    _mm256_storeu_pd(out.data() + i + 4, _mm256_unpackhi_pd(cs, sn));
  }
  if (i < n) scalar::box_muller(u.subspan(i), out.subspan(i));
}

double dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a.data() + i), _mm256_loadu_pd(b.data() + i), acc);
  }
  double s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  const std::size_t n = x.size();
  const __m256d va = set1(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d r = _mm256_fmadd_pd(va, _mm256_loadu_pd(x.data() + i),
                                      _mm256_loadu_pd(y.data() + i));
    _mm256_storeu_pd(y.data() + i, r);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace exoc::kernels::avx2
