#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "exoc/dataset.hpp"

namespace exoc {

enum class FeatureSource { random_mf, external_ratings };

struct SynthSpec {
  std::size_t users = 500;
  std::size_t items = 500;
  double rho = 0.0;
  // Exactly one of beta / target_sparsity must be set.
  std::optional<double> beta;
  std::optional<double> target_sparsity;
  FeatureSource feature_source = FeatureSource::random_mf;
  std::size_t feature_dim = 4;              // rank of the random factors
  std::filesystem::path ratings_path;       // external_ratings only
  std::size_t mf_dim = 8;                   // external_ratings MF fit
  std::size_t mf_epochs = 50;
  LabelKind label_mode = LabelKind::continuous;
  std::uint64_t seed = 0;
  // y = preference_scale * x + delta; z = selection_scale * tanh(x - mean x) + eps - beta
  double preference_scale = 5.0;
  double selection_scale = 5.0;

  /// Throws ValidationError on inconsistent settings.
  void validate() const;
};

struct BaseFeatures {
  std::size_t users = 0;
  std::size_t items = 0;
  std::vector<double> x;             // row-major users x items
  std::vector<double> loss_history;  // per-epoch MF training loss (external only)
};

/// Centers and scales to unit variance; a constant input is only centered.
void standardize(std::vector<double>& x);

/// x = U V^T / sqrt(k), standardized. U is users x k, V is items x k, both
/// row-major.
std::vector<double> features_from_factors(std::span<const double> u, std::span<const double> v,
                                          std::size_t users, std::size_t items, std::size_t k);

/// Random low-rank features, or an MF fit to an external ratings file whose
/// predictions over every pair become x.
BaseFeatures fit_base_features(const SynthSpec& spec);

struct SynthDataset {
  std::size_t users = 0;
  std::size_t items = 0;
  LabelKind label_mode = LabelKind::continuous;
  double rho = 0.0;
  double beta = 0.0;
  double sparsity = 0.0;
  std::vector<double> x;
  std::vector<double> eps;    // selection noise
  std::vector<double> delta;  // preference noise
  std::vector<double> r;      // true preference (continuous y or 0/1)
  std::vector<std::uint8_t> o;

  std::uint64_t num_pairs() const { return static_cast<std::uint64_t>(users) * items; }
  /// Observed pairs with their labels, plus the dense feature.
  InteractionDataset training_view() const;
};

/// mean over pairs of 1{selection_scale * tanh(x - mean x) + eps - beta > 0}.
double observed_rate(std::span<const double> x, std::span<const double> eps, double beta,
                     double selection_scale);

SynthDataset generate(const SynthSpec& spec);
SynthDataset generate(const SynthSpec& spec, const BaseFeatures& features);

struct TrainTestSplit {
  InteractionDataset train;
  std::vector<Interaction> test;
};

/// Unbiased test set: round(fraction * |D|) pairs drawn uniformly from all
/// of D (observed or not) carrying their true label.
TrainTestSplit split_test(const SynthDataset& data, double fraction, std::uint64_t seed);

}  // namespace exoc
