#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace exoc {

double mse(std::span<const double> preds, std::span<const double> labels);

/// Mann-Whitney AUC, ties counted as 1/2. Throws ValidationError unless both
/// classes are present.
double auc(std::span<const double> scores, std::span<const double> labels);

struct ScoredItem {
  std::uint32_t item = 0;
  double score = 0.0;
  bool positive = false;
};

/// One user's test items in any order.
using UserList = std::vector<ScoredItem>;

/// 1-based ranks by descending score; ties broken by ascending item index.
std::vector<std::size_t> rank_items(const UserList& items);

/// Mean over users with at least one positive test item of
/// (# positives ranked <= k) / min(k, # positives).
double recall_at_k(std::span<const UserList> users, std::size_t k);

/// Mean over users with at least one positive of DCG@k / IDCG@k, with
/// DCG@k = sum over positives ranked <= k of 1 / log2(rank + 1).
double ndcg_at_k(std::span<const UserList> users, std::size_t k);

struct EvalReport {
  double mse = 0.0;
  double auc = 0.0;
  double recall_at_k = 0.0;
  double ndcg_at_k = 0.0;
  std::size_t k = 5;
  std::size_t n_test = 0;
  bool has_auc = false;

  /// "key=value" lines, fixed order, 17 significant digits.
  std::string to_key_value() const;
  static std::string csv_header();
  std::string to_csv_row() const;
};

/// Groups (user, item, score, label) rows into per-user lists; labels > 0.5
/// count as positive.
std::vector<UserList> group_by_user(std::span<const std::uint32_t> users,
                                    std::span<const std::uint32_t> items,
                                    std::span<const double> scores,
                                    std::span<const double> labels);

/// Formats a double with 17 significant digits ("%.17g").
std::string format_double(double v);

}  // namespace exoc
