#pragma once

// Data-parallel inner loops. Each kernel has a scalar reference in
// exoc::kernels::scalar and, on x86-64, an AVX2+FMA variant in
// exoc::kernels::avx2. The unqualified entry points dispatch once at startup
// to the widest variant the CPU supports; EXOC_ISA=scalar forces the
// reference path.

#include <cstddef>
#include <span>
#include <string_view>

namespace exoc::kernels {

// Sums over the samples with eps_l > threshold, where
// t_l = (shift + rho * eps_l) / sqrt(1 - rho^2):
//   cdf     = sum Phi(t_l)
//   pdf     = sum phi(t_l)
//   pdf_eps = sum phi(t_l) * eps_l
//   pdf_t   = sum phi(t_l) * t_l
// These are the pieces of a Monte Carlo orthant estimate and its partial
// derivatives with respect to shift and rho.
struct McMoments {
  double cdf = 0.0;
  double pdf = 0.0;
  double pdf_eps = 0.0;
  double pdf_t = 0.0;
};

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);
bool isa_supported(Isa isa);
Isa active_isa();
/// Overrides the dispatch choice; throws ValidationError if unsupported.
void set_active_isa(Isa isa);

McMoments mc_moments(std::span<const double> eps, double shift, double rho, double threshold);
void normal_cdf(std::span<const double> x, std::span<double> out);
double dot(std::span<const double> a, std::span<const double> b);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
/// Box-Muller on interleaved uniform pairs (u1 in (0, 1], u2 in [0, 1)):
/// out[2i] = r cos(2 pi u2), out[2i+1] = r sin(2 pi u2), r = sqrt(-2 log u1).
/// u.size() must be even and equal out.size().
void box_muller(std::span<const double> u, std::span<double> out);

namespace scalar {
McMoments mc_moments(std::span<const double> eps, double shift, double rho, double threshold);
void normal_cdf(std::span<const double> x, std::span<double> out);
double dot(std::span<const double> a, std::span<const double> b);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void box_muller(std::span<const double> u, std::span<double> out);
}  // namespace scalar

#if defined(__x86_64__)
namespace avx2 {
McMoments mc_moments(std::span<const double> eps, double shift, double rho, double threshold);
void normal_cdf(std::span<const double> x, std::span<double> out);
double dot(std::span<const double> a, std::span<const double> b);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void box_muller(std::span<const double> u, std::span<double> out);
/// Vector exp and log, exposed for equivalence tests.
void exp(std::span<const double> x, std::span<double> out);
void log(std::span<const double> x, std::span<double> out);
}  // namespace avx2
#endif

}  // namespace exoc::kernels
