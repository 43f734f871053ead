#include "exoc/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "exoc/error.hpp"
#include "exoc/numkernel.hpp"

namespace exoc {

namespace {
constexpr double kSparsityTolerance = 0.002;
}

void SynthSpec::validate() const {
  if (feature_source == FeatureSource::random_mf && (users < 2 || items < 2)) {
    throw ValidationError("synthetic data needs at least 2 users and 2 items");
  }
  if (!(std::fabs(rho) < 1.0)) throw ValidationError("rho must lie in (-1, 1)");
  if (beta.has_value() == target_sparsity.has_value()) {
    throw ValidationError("set exactly one of beta and target sparsity");
  }
  if (target_sparsity && !(*target_sparsity > 0.0 && *target_sparsity < 1.0)) {
    throw ValidationError("target sparsity must lie in (0, 1)");
  }
  if (beta && !std::isfinite(*beta)) throw ValidationError("beta must be finite");
  if (feature_dim == 0 || mf_dim == 0) throw ValidationError("feature ranks must be positive");
  if (feature_source == FeatureSource::external_ratings && ratings_path.empty()) {
    throw ValidationError("external feature source needs a ratings path");
  }
}

void standardize(std::vector<double>& x) {
  if (x.empty()) return;
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv_sd = var > 1e-300 ? 1.0 / std::sqrt(var) : 1.0;
  for (double& v : x) v = (v - mean) * inv_sd;
}

std::vector<double> features_from_factors(std::span<const double> u, std::span<const double> v,
                                          std::size_t users, std::size_t items, std::size_t k) {
  if (u.size() != users * k || v.size() != items * k) throw ShapeError("factor shape mismatch");
  std::vector<double> x(users * items);
  const double scale = 1.0 / std::sqrt(static_cast<double>(k));
  for (std::size_t a = 0; a < users; ++a) {
    for (std::size_t b = 0; b < items; ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += u[a * k + j] * v[b * k + j];
      x[a * items + b] = s * scale;
    }
  }
  standardize(x);
  return x;
}

namespace {

BaseFeatures random_features(const SynthSpec& spec) {
  RngStream root(spec.seed, 0x464541ULL);  // "FEA"
  RngStream ru = root.substream(1);
  RngStream rv = root.substream(2);
  std::vector<double> u(spec.users * spec.feature_dim);
  std::vector<double> v(spec.items * spec.feature_dim);
  ru.fill_normal(u);
  rv.fill_normal(v);
  BaseFeatures out;
  out.users = spec.users;
  out.items = spec.items;
  out.x = features_from_factors(u, v, spec.users, spec.items, spec.feature_dim);
  return out;
}

// Biased MF fitted by SGD on the rating triples.
BaseFeatures external_features(const SynthSpec& spec) {
  const auto rows = read_triples(spec.ratings_path);
  IdMap ids;
  struct Obs {
    std::uint32_t u, i;
    double r;
  };
  std::vector<Obs> obs;
  obs.reserve(rows.size());
  for (const auto& row : rows) obs.push_back({ids.intern_user(row.user), ids.intern_item(row.item), row.value});
  const std::size_t m = ids.users.size();
  const std::size_t n = ids.items.size();
  const std::size_t k = spec.mf_dim;
  double mu = 0.0;
  for (const auto& o : obs) mu += o.r;
  mu /= static_cast<double>(obs.size());

  RngStream rng(spec.seed, 0x4D4646ULL);  // "MFF"
  std::vector<double> p(m * k);
  std::vector<double> q(n * k);
  for (double& w : p) w = 0.1 * rng.normal();
  for (double& w : q) w = 0.1 * rng.normal();
  std::vector<double> bu(m, 0.0);
  std::vector<double> bi(n, 0.0);
  constexpr double kLr = 0.01;
  constexpr double kReg = 0.02;

  auto predict = [&](std::size_t u, std::size_t i) {
    double s = mu + bu[u] + bi[i];
    for (std::size_t j = 0; j < k; ++j) s += p[u * k + j] * q[i * k + j];
    return s;
  };

  BaseFeatures out;
  out.users = m;
  out.items = n;
  std::vector<std::size_t> order(obs.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < spec.mf_epochs; ++epoch) {
    RngStream shuffle = rng.substream(epoch);
    for (std::size_t a = order.size(); a > 1; --a) std::swap(order[a - 1], order[shuffle.below(a)]);
    for (std::size_t idx : order) {
      const Obs& o = obs[idx];
      const double err = o.r - predict(o.u, o.i);
      bu[o.u] += kLr * (err - kReg * bu[o.u]);
      bi[o.i] += kLr * (err - kReg * bi[o.i]);
      for (std::size_t j = 0; j < k; ++j) {
        const double pu = p[o.u * k + j];
        const double qi = q[o.i * k + j];
        p[o.u * k + j] += kLr * (err * qi - kReg * pu);
        q[o.i * k + j] += kLr * (err * pu - kReg * qi);
      }
    }
    double loss = 0.0;
    for (const auto& o : obs) {
      const double err = o.r - predict(o.u, o.i);
      loss += err * err;
    }
    out.loss_history.push_back(loss / static_cast<double>(obs.size()));
  }
  out.x.resize(m * n);
  for (std::size_t u = 0; u < m; ++u) {
    for (std::size_t i = 0; i < n; ++i) out.x[u * n + i] = predict(u, i);
  }
  standardize(out.x);
  return out;
}

}  // namespace

BaseFeatures fit_base_features(const SynthSpec& spec) {
  spec.validate();
  return spec.feature_source == FeatureSource::random_mf ? random_features(spec)
                                                         : external_features(spec);
}

double observed_rate(std::span<const double> x, std::span<const double> eps, double beta,
                     double selection_scale) {
  if (x.empty()) return 0.0;
  const double mean_x = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  std::size_t count = 0;
  for (std::size_t p = 0; p < x.size(); ++p) {
    if (selection_scale * std::tanh(x[p] - mean_x) + eps[p] - beta > 0.0) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(x.size());
}

SynthDataset generate(const SynthSpec& spec) { return generate(spec, fit_base_features(spec)); }

SynthDataset generate(const SynthSpec& spec, const BaseFeatures& features) {
  spec.validate();
  SynthDataset d;
  d.users = features.users;
  d.items = features.items;
  d.label_mode = spec.label_mode;
  d.rho = spec.rho;
  d.x = features.x;
  const std::uint64_t n = d.num_pairs();
  if (d.x.size() != n) throw ShapeError("feature matrix does not cover the grid");

  RngStream noise(spec.seed, 0x4E4F49ULL);  // "NOI"
  d.eps.resize(n);
  d.delta.resize(n);
  for (std::uint64_t p = 0; p < n; ++p) {
    RngStream pair = noise.substream(p);
    const BivariateSample s = sample_bivariate(spec.rho, pair);
    d.eps[p] = s.eps;
    d.delta[p] = s.delta;
  }

  d.r.resize(n);
  for (std::uint64_t p = 0; p < n; ++p) {
    const double y = spec.preference_scale * d.x[p] + d.delta[p];
    d.r[p] = spec.label_mode == LabelKind::binary ? (y > 0.0 ? 1.0 : 0.0) : y;
  }

  if (spec.beta) {
    d.beta = *spec.beta;
  } else {
    // mean(o) is non-increasing in beta for frozen draws.
    const double target = *spec.target_sparsity;
    const double mean_x = std::accumulate(d.x.begin(), d.x.end(), 0.0) / static_cast<double>(n);
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::uint64_t p = 0; p < n; ++p) {
      const double z0 = spec.selection_scale * std::tanh(d.x[p] - mean_x) + d.eps[p];
      lo = std::min(lo, z0);
      hi = std::max(hi, z0);
    }
    lo -= 1.0;
    hi += 1.0;
    double beta = 0.5 * (lo + hi);
    double rate = observed_rate(d.x, d.eps, beta, spec.selection_scale);
    for (int it = 0; it < 200 && std::fabs(rate - target) > 1e-6; ++it) {
      if (rate > target) {
        lo = beta;
      } else {
        hi = beta;
      }
      beta = 0.5 * (lo + hi);
      rate = observed_rate(d.x, d.eps, beta, spec.selection_scale);
    }
    if (std::fabs(rate - target) > kSparsityTolerance) {
      throw NumericError("sparsity bisection could not bracket the target (degenerate features?)");
    }
    d.beta = beta;
  }

  const double mean_x = std::accumulate(d.x.begin(), d.x.end(), 0.0) / static_cast<double>(n);
  d.o.resize(n);
  std::size_t count = 0;
  for (std::uint64_t p = 0; p < n; ++p) {
    const double z = spec.selection_scale * std::tanh(d.x[p] - mean_x) + d.eps[p] - d.beta;
    d.o[p] = z > 0.0 ? 1 : 0;
    count += d.o[p];
  }
  d.sparsity = static_cast<double>(count) / static_cast<double>(n);
  return d;
}

InteractionDataset SynthDataset::training_view() const {
  InteractionDataset ds(users, items, label_mode);
  for (std::uint64_t p = 0; p < num_pairs(); ++p) {
    if (o[p]) {
      ds.set_observed(static_cast<std::uint32_t>(p / items), static_cast<std::uint32_t>(p % items),
                      r[p]);
    }
  }
  ds.set_features(x);
  return ds;
}

TrainTestSplit split_test(const SynthDataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("test fraction must lie in (0, 1)");
  const std::uint64_t n = data.num_pairs();
  const auto count = static_cast<std::uint64_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<std::uint64_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  RngStream rng(seed, 0x544553ULL);  // "TES"
  for (std::uint64_t a = 0; a < count; ++a) std::swap(idx[a], idx[a + rng.below(n - a)]);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  TrainTestSplit out{data.training_view(), {}};
  out.test.reserve(count);
  for (std::uint64_t p : idx) {
    out.test.push_back({static_cast<std::uint32_t>(p / data.items),
                        static_cast<std::uint32_t>(p % data.items), data.r[p]});
  }
  return out;
}

}  // namespace exoc
