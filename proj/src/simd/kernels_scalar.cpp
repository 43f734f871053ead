#include <cmath>
#include <numbers>

#include "exoc/kernels.hpp"
#include "exoc/numkernel.hpp"

namespace exoc::kernels::scalar {

McMoments mc_moments(std::span<const double> eps, double shift, double rho, double threshold) {
  const double inv_s = 1.0 / std::sqrt(1.0 - rho * rho);
  McMoments m;
  for (double e : eps) {
    if (!(e > threshold)) continue;
    const double t = (shift + rho * e) * inv_s;
    const double dens = std_normal_pdf(t);
    m.cdf += std_normal_cdf(t);
    m.pdf += dens;
    m.pdf_eps += dens * e;
    m.pdf_t += dens * t;
  }
  return m;
}

void normal_cdf(std::span<const double> x, std::span<double> out) {
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std_normal_cdf(x[i]);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void box_muller(std::span<const double> u, std::span<double> out) {
  for (std::size_t i = 0; i + 1 < u.size(); i += 2) {
    const double r = std::sqrt(-2.0 * std::log(u[i]));
    const double theta = 2.0 * std::numbers::pi * u[i + 1];
    out[i] = r * std::cos(theta);
    out[i + 1] = r * std::sin(theta);
  }
}

}  // namespace exoc::kernels::scalar
