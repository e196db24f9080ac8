#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dataset.hpp"
#include "json.hpp"

namespace talos {

/// One user's ranking: candidate scores with masked items removed, plus which
/// candidates are relevant. Rank of item i is pi_i = #{j : s_j >= s_i}.
class RankedEval {
 public:
  RankedEval() = default;

  /// `scores` indexed by item; `relevant` and `masked` are item indices.
  RankedEval(std::span<const double> scores, std::span<const Index> relevant,
             std::span<const Index> masked = {}) {
    std::vector<char> flag(scores.size(), 0);
    for (Index i : masked) {
      if (i >= scores.size()) throw std::out_of_range("RankedEval: masked index out of range");
      flag[i] = 2;
    }
    for (Index i : relevant) {
      if (i >= scores.size()) throw std::out_of_range("RankedEval: relevant index out of range");
      if (flag[i] == 2) throw std::invalid_argument("RankedEval: relevant item is masked");
      flag[i] = 1;
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (flag[i] == 2) continue;
      if (std::isnan(scores[i])) throw std::invalid_argument("RankedEval: NaN score");
      (flag[i] == 1 ? pos_ : neg_).push_back(scores[i]);
    }
    std::sort(pos_.begin(), pos_.end());
    std::sort(neg_.begin(), neg_.end());
    ranks_.reserve(pos_.size());
    for (double s : pos_) ranks_.push_back(count_at_least(s));
    std::sort(ranks_.begin(), ranks_.end());
  }

  std::size_t num_positives() const { return pos_.size(); }
  std::size_t num_negatives() const { return neg_.size(); }
  std::size_t num_candidates() const { return pos_.size() + neg_.size(); }

  /// Ranks of the relevant items, ascending.
  const std::vector<std::size_t>& positive_ranks() const { return ranks_; }
  /// Ascending positive / negative scores.
  const std::vector<double>& positive_scores() const { return pos_; }
  const std::vector<double>& negative_scores() const { return neg_; }

  /// #{candidates with score >= s}.
  std::size_t count_at_least(double s) const {
    auto ge = [s](const std::vector<double>& v) {
      return static_cast<std::size_t>(v.end() - std::lower_bound(v.begin(), v.end(), s));
    };
    return ge(pos_) + ge(neg_);
  }

  std::size_t hits_at(std::size_t k) const {
    return static_cast<std::size_t>(std::upper_bound(ranks_.begin(), ranks_.end(), k) -
                                    ranks_.begin());
  }

 private:
  std::vector<double> pos_, neg_;
  std::vector<std::size_t> ranks_;
};

namespace detail {
inline void require_positives(const RankedEval& e) {
  if (e.num_positives() == 0) throw std::invalid_argument("metric needs at least one positive");
}
inline void require_k(std::size_t k) {
  if (k == 0) throw std::invalid_argument("cutoff K must be >= 1");
}
}  // namespace detail

/// (hits/K, hits/|P|).
inline std::pair<double, double> precision_recall_at_k(const RankedEval& e, std::size_t k) {
  detail::require_k(k);
  detail::require_positives(e);
  const double hits = static_cast<double>(e.hits_at(k));
  return {hits / static_cast<double>(k), hits / static_cast<double>(e.num_positives())};
}

/// Binary-relevance NDCG truncated at K.
inline double ndcg_at_k(const RankedEval& e, std::size_t k) {
  detail::require_k(k);
  detail::require_positives(e);
  double dcg = 0.0;
  for (auto r : e.positive_ranks()) {
    if (r > k) break;
    dcg += 1.0 / std::log2(1.0 + static_cast<double>(r));
  }
  double idcg = 0.0;
  const std::size_t ideal = std::min(e.num_positives(), k);
  for (std::size_t r = 1; r <= ideal; ++r) idcg += 1.0 / std::log2(1.0 + static_cast<double>(r));
  return std::min(1.0, dcg / idcg);
}

/// NDCG over the whole candidate list.
inline double ndcg(const RankedEval& e) {
  return ndcg_at_k(e, std::max<std::size_t>(1, e.num_candidates()));
}

inline double mrr_at_k(const RankedEval& e, std::size_t k) {
  detail::require_k(k);
  detail::require_positives(e);
  const auto best = e.positive_ranks().front();
  return best <= k ? 1.0 / static_cast<double>(best) : 0.0;
}

/// Fraction of (positive, negative) pairs with s_pos >= s_neg.
inline double auc(const RankedEval& e) {
  detail::require_positives(e);
  if (e.num_negatives() == 0) throw std::invalid_argument("auc needs at least one negative");
  const auto& neg = e.negative_scores();
  double pairs = 0.0;
  for (double s : e.positive_scores())
    pairs += static_cast<double>(std::upper_bound(neg.begin(), neg.end(), s) - neg.begin());
  return pairs / (static_cast<double>(e.num_positives()) * static_cast<double>(e.num_negatives()));
}

/// Lower-left partial AUC: pairs restricted to positives scoring at least the
/// ceil(alpha|P|)-th largest positive and negatives scoring at least the
/// ceil(beta|N|)-th largest negative, normalized by |P||N|.
inline double llpauc(const RankedEval& e, double alpha, double beta) {
  if (!(alpha > 0.0 && alpha <= 1.0) || !(beta > 0.0 && beta <= 1.0))
    throw std::invalid_argument("llpauc: alpha and beta must lie in (0, 1]");
  detail::require_positives(e);
  if (e.num_negatives() == 0) throw std::invalid_argument("llpauc needs at least one negative");
  const auto& pos = e.positive_scores();
  const auto& neg = e.negative_scores();
  auto kth_largest = [](const std::vector<double>& asc, double frac) {
    auto k = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(asc.size()) - 1e-12));
    k = std::clamp<std::size_t>(k, 1, asc.size());
    return asc[asc.size() - k];
  };
  const double eta_a = kth_largest(pos, alpha);
  const double eta_b = kth_largest(neg, beta);
  const auto lo = std::lower_bound(neg.begin(), neg.end(), eta_b);
  double pairs = 0.0;
  for (auto it = std::lower_bound(pos.begin(), pos.end(), eta_a); it != pos.end(); ++it) {
    const auto hi = std::upper_bound(neg.begin(), neg.end(), *it);
    if (hi > lo) pairs += static_cast<double>(hi - lo);
  }
  return pairs / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

struct MetricOptions {
  std::vector<std::size_t> cutoffs{20};
  double llpauc_alpha = 0.3;
  double llpauc_beta = 0.1;
  bool pairwise = true;  // auc, llpauc, full ndcg
};

inline const std::vector<std::string>& cutoff_metric_names() {
  static const std::vector<std::string> names{"precision", "recall", "ndcg", "mrr"};
  return names;
}

inline std::string metric_key(const std::string& name, std::size_t k) {
  return name + "@" + std::to_string(k);
}

/// Averages over evaluated users. Users are added in a fixed order so the
/// floating-point reduction is reproducible.
struct MetricReport {
  std::map<std::string, double> values;
  std::size_t num_users = 0;
  std::string split;
  std::string loss;
  double tau = 0.0;
  std::uint64_t seed = 0;
  long epoch = -1;

  double at(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw std::out_of_range("no metric " + key);
    return it->second;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["split"] = split;
    j["num_users"] = num_users;
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [k, v] : values) m[k] = v;
    j["metrics"] = m;
    j["loss"] = loss;
    j["tau"] = tau;
    j["seed"] = seed;
    j["epoch"] = epoch;
    return j;
  }
};

class MetricAccumulator {
 public:
  explicit MetricAccumulator(MetricOptions opts) : opts_(std::move(opts)) {
    for (auto k : opts_.cutoffs) detail::require_k(k);
  }

  /// Skips users without positives; returns whether the user counted.
  bool add(const RankedEval& e) {
    if (e.num_positives() == 0) return false;
    for (auto k : opts_.cutoffs) {
      const auto [p, r] = precision_recall_at_k(e, k);
      sums_[metric_key("precision", k)] += p;
      sums_[metric_key("recall", k)] += r;
      sums_[metric_key("ndcg", k)] += ndcg_at_k(e, k);
      sums_[metric_key("mrr", k)] += mrr_at_k(e, k);
    }
    if (opts_.pairwise && e.num_negatives() > 0) {
      sums_["auc"] += auc(e);
      sums_["llpauc"] += llpauc(e, opts_.llpauc_alpha, opts_.llpauc_beta);
      sums_["ndcg"] += ndcg(e);
      ++pairwise_users_;
    }
    ++users_;
    return true;
  }

  MetricReport report() const {
    MetricReport r;
    r.num_users = users_;
    for (const auto& [k, s] : sums_) {
      const bool pw = k == "auc" || k == "llpauc" || k == "ndcg";
      const auto n = pw ? pairwise_users_ : users_;
      r.values[k] = n ? s / static_cast<double>(n) : 0.0;
    }
    if (users_ == 0)
      for (auto k : opts_.cutoffs)
        for (const auto& name : cutoff_metric_names()) r.values[metric_key(name, k)] = 0.0;
    return r;
  }

 private:
  MetricOptions opts_;
  std::map<std::string, double> sums_;
  std::size_t users_ = 0;
  std::size_t pairwise_users_ = 0;
};

}  // namespace talos
