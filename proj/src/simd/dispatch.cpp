#include <atomic>
#include <cstdlib>
#include <string>

#include "exoc/error.hpp"
#include "exoc/kernels.hpp"

namespace exoc::kernels {
namespace {

struct Table {
  McMoments (*mc_moments)(std::span<const double>, double, double, double);
  void (*normal_cdf)(std::span<const double>, std::span<double>);
  double (*dot)(std::span<const double>, std::span<const double>);
  void (*axpy)(double, std::span<const double>, std::span<double>);
  void (*box_muller)(std::span<const double>, std::span<double>);
};

constexpr Table kScalar{scalar::mc_moments, scalar::normal_cdf, scalar::dot, scalar::axpy,
                        scalar::box_muller};
#if defined(__x86_64__)
constexpr Table kAvx2{avx2::mc_moments, avx2::normal_cdf, avx2::dot, avx2::axpy,
                      avx2::box_muller};
#endif

const Table& table_for(Isa isa) {
#if defined(__x86_64__)
  if (isa == Isa::avx2) return kAvx2;
#endif
  return kScalar;
}

Isa detect() {
  if (const char* env = std::getenv("EXOC_ISA")) {
    if (std::string(env) == "scalar") return Isa::scalar;
  }
  return isa_supported(Isa::avx2) ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

const Table& active() { return table_for(current().load(std::memory_order_relaxed)); }

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool isa_supported(Isa isa) {
  if (isa == Isa::scalar) return true;
#if defined(__x86_64__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw ValidationError("instruction set not supported on this CPU: " +
                          std::string(isa_name(isa)));
  }
  current().store(isa, std::memory_order_relaxed);
}

McMoments mc_moments(std::span<const double> eps, double shift, double rho, double threshold) {
  return active().mc_moments(eps, shift, rho, threshold);
}

void normal_cdf(std::span<const double> x, std::span<double> out) {
  active().normal_cdf(x, out);
}

double dot(std::span<const double> a, std::span<const double> b) { return active().dot(a, b); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x, y);
}

void box_muller(std::span<const double> u, std::span<double> out) {
  if (u.size() % 2 != 0 || u.size() != out.size()) {
    throw ValidationError("box_muller needs an even number of uniforms and a matching output");
  }
  active().box_muller(u, out);
}

}  // namespace exoc::kernels
