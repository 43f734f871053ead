#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "exoc/scoremodel.hpp"

namespace exoc {

enum class LabelKind { continuous, binary };

const char* label_kind_name(LabelKind kind);
LabelKind parse_label_kind(const std::string& s);

struct Interaction {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  double label = 0.0;
};

// One user-item pair of D as seen by the losses: observation bit, label
// (meaningful only when observed, or for fully labelled synthetic data),
// scalar feature and a stable key for per-pair random substreams.
struct PairSample {
  PairRef pair;
  double x = 0.0;
  bool observed = false;
  double label = 0.0;
  std::uint64_t key = 0;
};

ScoreInput input_for(const ScoreModel& model, const PairSample& s);

// Training data: the m x n grid D with the observed subset O and its labels.
// Unobserved pairs are implicit. An optional dense feature x covers every
// pair of D.
class InteractionDataset {
 public:
  InteractionDataset(std::size_t users, std::size_t items, LabelKind kind);

  std::size_t users() const { return users_; }
  std::size_t items() const { return items_; }
  std::uint64_t num_pairs() const { return static_cast<std::uint64_t>(users_) * items_; }
  LabelKind label_kind() const { return kind_; }

  /// Adds or overwrites an observed pair; returns false when it replaced an
  /// earlier label.
  bool set_observed(std::uint32_t user, std::uint32_t item, double label);

  const std::vector<Interaction>& observed() const { return observed_; }
  std::optional<std::size_t> observed_index(std::uint64_t flat) const;
  double sparsity() const;

  std::uint64_t flat(PairRef p) const { return static_cast<std::uint64_t>(p.user) * items_ + p.item; }
  PairRef pair_at(std::uint64_t flat) const;

  bool has_features() const { return !features_.empty(); }
  void set_features(std::vector<double> x);
  const std::vector<double>& features() const { return features_; }
  double feature(std::uint64_t flat) const { return features_.empty() ? 0.0 : features_[flat]; }

  /// Pair of D by flat index, with its observation status.
  PairSample sample(std::uint64_t flat) const;
  /// The i-th observed pair.
  PairSample observed_sample(std::size_t i) const;
  /// A fully-labelled pair (test set entries): observed bit left false.
  PairSample labelled_sample(const Interaction& it) const;

 private:
  std::size_t users_;
  std::size_t items_;
  LabelKind kind_;
  std::vector<Interaction> observed_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::vector<double> features_;
};

struct BinarizeRule {
  enum class Kind { none, rating_ge_threshold, ratio_lt_threshold };
  Kind kind = Kind::none;
  double threshold = 0.0;

  /// "ge:3", "lt:2" or "none".
  static BinarizeRule parse(const std::string& spec);
  std::string to_string() const;
  double apply(double raw) const;
};

struct RawTriple {
  std::string user;
  std::string item;
  double value = 0.0;
};

/// Reads "user_id,item_id,rating" lines; comma or tab separated, optional
/// header. Throws FormatError with the line number on malformed input and on
/// empty files.
std::vector<RawTriple> read_triples(const std::filesystem::path& path);

struct IdMap {
  std::vector<std::string> users;
  std::vector<std::string> items;
  std::unordered_map<std::string, std::uint32_t> user_index;
  std::unordered_map<std::string, std::uint32_t> item_index;

  std::uint32_t intern_user(const std::string& id);
  std::uint32_t intern_item(const std::string& id);
  void save(const std::filesystem::path& path) const;
};

struct LoadedData {
  InteractionDataset train;
  std::vector<Interaction> test;
  IdMap ids;
  std::vector<std::string> warnings;
};

/// Loads MNAR training triples and an unbiased test file, applies the
/// binarization rule and re-indexes ids densely over both files. Duplicate
/// (user, item) lines keep the last occurrence and add a warning.
LoadedData load_dataset(const std::filesystem::path& train_path,
                        const std::filesystem::path& test_path, const BinarizeRule& rule);

void write_triples(const std::filesystem::path& path, const std::vector<Interaction>& rows,
                   const char* value_header = "rating");

}  // namespace exoc
