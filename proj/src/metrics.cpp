#include "exoc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "exoc/error.hpp"

namespace exoc {

double mse(std::span<const double> preds, std::span<const double> labels) {
  if (preds.size() != labels.size()) throw ValidationError("mse: length mismatch");
  if (preds.empty()) throw ValidationError("mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double d = preds[i] - labels[i];
    s += d * d;
  }
  return s / static_cast<double>(preds.size());
}

double auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw ValidationError("auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Rank-sum with midranks for ties.
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[order[t]] > 0.5) {
        pos_rank_sum += mid;
        ++n_pos;
      }
    }
    i = j + 1;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("auc: need both positive and negative labels");
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

std::vector<std::size_t> rank_items(const UserList& items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (items[a].score != items[b].score) return items[a].score > items[b].score;
    return items[a].item < items[b].item;
  });
  std::vector<std::size_t> rank(items.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r + 1;
  return rank;
}

namespace {

std::size_t count_positive(const UserList& items) {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [](const ScoredItem& s) { return s.positive; }));
}

void check_k(std::size_t k) {
  if (k == 0) throw ValidationError("k must be at least 1");
}

}  // namespace

double recall_at_k(std::span<const UserList> users, std::size_t k) {
  check_k(k);
  double total = 0.0;
  std::size_t counted = 0;
  for (const UserList& u : users) {
    const std::size_t n_pos = count_positive(u);
    if (n_pos == 0) continue;
    const auto rank = rank_items(u);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      if (u[i].positive && rank[i] <= k) ++hits;
    }
    total += static_cast<double>(hits) / static_cast<double>(std::min(k, n_pos));
    ++counted;
  }
  return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

double ndcg_at_k(std::span<const UserList> users, std::size_t k) {
  check_k(k);
  double total = 0.0;
  std::size_t counted = 0;
  for (const UserList& u : users) {
    const std::size_t n_pos = count_positive(u);
    if (n_pos == 0) continue;
    const auto rank = rank_items(u);
    double dcg = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      if (u[i].positive && rank[i] <= k) dcg += 1.0 / std::log2(static_cast<double>(rank[i]) + 1.0);
    }
    double idcg = 0.0;
    for (std::size_t r = 1; r <= std::min(k, n_pos); ++r) {
      idcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
    total += dcg / idcg;
    ++counted;
  }
  return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

std::vector<UserList> group_by_user(std::span<const std::uint32_t> users,
                                    std::span<const std::uint32_t> items,
                                    std::span<const double> scores,
                                    std::span<const double> labels) {
  std::map<std::uint32_t, UserList> by_user;
  for (std::size_t i = 0; i < users.size(); ++i) {
    by_user[users[i]].push_back({items[i], scores[i], labels[i] > 0.5});
  }
  std::vector<UserList> out;
  out.reserve(by_user.size());
  for (auto& [u, list] : by_user) out.push_back(std::move(list));
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string EvalReport::to_key_value() const {
  std::ostringstream os;
  os << "n_test=" << n_test << '\n';
  os << "k=" << k << '\n';
  os << "mse=" << format_double(mse) << '\n';
  os << "auc=" << (has_auc ? format_double(auc) : std::string("nan")) << '\n';
  os << "recall_at_k=" << format_double(recall_at_k) << '\n';
  os << "ndcg_at_k=" << format_double(ndcg_at_k) << '\n';
  return os.str();
}

std::string EvalReport::csv_header() { return "n_test,k,mse,auc,recall_at_k,ndcg_at_k"; }

std::string EvalReport::to_csv_row() const {
  std::ostringstream os;
  os << n_test << ',' << k << ',' << format_double(mse) << ','
     << (has_auc ? format_double(auc) : std::string("nan")) << ',' << format_double(recall_at_k)
     << ',' << format_double(ndcg_at_k);
  return os.str();
}

}  // namespace exoc
