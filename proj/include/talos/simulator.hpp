#pragma once

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "errors.hpp"
#include "json.hpp"
#include "metrics.hpp"
#include "parallel.hpp"
#include "random.hpp"

namespace talos {

inline constexpr std::size_t kMaxSimulatedRank = 200;

struct SyntheticRanking {
  std::size_t total_items = 0;
  std::vector<std::size_t> positive_ranks;  // sorted, distinct, 1-based

  std::size_t num_positives() const { return positive_ranks.size(); }
};

/// m distinct ranks drawn uniformly from {1..200}.
inline SyntheticRanking sample_ranking(Rng& rng, std::size_t total_items, std::size_t m) {
  if (m < 1 || m > kMaxSimulatedRank)
    throw std::invalid_argument("sample_ranking: m must lie in [1, 200]");
  if (total_items < kMaxSimulatedRank)
    throw std::invalid_argument("sample_ranking: need at least 200 items");
  std::vector<std::size_t> pool(kMaxSimulatedRank);
  for (std::size_t k = 0; k < pool.size(); ++k) pool[k] = k + 1;
  for (std::size_t k = 0; k < m; ++k) std::swap(pool[k], pool[k + rng.below(pool.size() - k)]);
  SyntheticRanking r{total_items, {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(m)}};
  std::sort(r.positive_ranks.begin(), r.positive_ranks.end());
  return r;
}

struct SimulatedMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double ndcg_at_k = 0.0;
  double ndcg = 0.0;
  double auc = 0.0;
  double llpauc = 0.0;
};

/// Expands the ranking into scores (item at rank r scores N - r) and evaluates it.
inline RankedEval expand_ranking(const SyntheticRanking& r) {
  std::vector<double> scores(r.total_items);
  for (std::size_t k = 0; k < scores.size(); ++k)
    scores[k] = static_cast<double>(r.total_items) - static_cast<double>(k + 1);
  std::vector<Index> relevant;
  relevant.reserve(r.positive_ranks.size());
  for (auto rank : r.positive_ranks) relevant.push_back(static_cast<Index>(rank - 1));
  return RankedEval(scores, relevant);
}

inline SimulatedMetrics metrics_from_ranking(const SyntheticRanking& r, std::size_t K,
                                             double alpha, double beta) {
  const auto e = expand_ranking(r);
  SimulatedMetrics m;
  std::tie(m.precision, m.recall) = precision_recall_at_k(e, K);
  m.ndcg_at_k = ndcg_at_k(e, K);
  m.ndcg = ndcg(e);
  m.auc = auc(e);
  m.llpauc = llpauc(e, alpha, beta);
  return m;
}

/// AUC straight from ranks: positive i (1-based, ascending rank) sits above
/// N - m - (rank_i - i) negatives.
inline double auc_from_ranks(const SyntheticRanking& r) {
  const double n = static_cast<double>(r.total_items);
  const double m = static_cast<double>(r.num_positives());
  double pairs = 0.0;
  for (std::size_t k = 0; k < r.positive_ranks.size(); ++k)
    pairs += n - m - (static_cast<double>(r.positive_ranks[k]) - static_cast<double>(k + 1));
  return pairs / (m * (n - m));
}

inline double simulated_metric(const SimulatedMetrics& m, const std::string& name, std::size_t K) {
  const auto suffix = "@" + std::to_string(K);
  if (name == "auc") return m.auc;
  if (name == "llpauc") return m.llpauc;
  if (name == "ndcg") return m.ndcg;
  if (name == "ndcg" + suffix) return m.ndcg_at_k;
  if (name == "precision" + suffix) return m.precision;
  if (name == "recall" + suffix) return m.recall;
  throw ConfigError("unknown simulator metric: " + name);
}

struct SimulationConfig {
  std::size_t trials = 10000;
  std::size_t total_items = 2000;
  std::size_t min_positives = 5;
  std::size_t max_positives = 50;
  std::size_t K = 20;
  double llpauc_alpha = 0.3;
  double llpauc_beta = 0.1;
  /// When set, both lists of a trial share one positive count.
  bool shared_positive_count = true;
  std::uint64_t seed = 2024;
  std::size_t workers = 1;
  std::vector<std::string> comparison_metrics;
  std::vector<std::string> topk_metrics;

  std::vector<std::string> comparisons() const {
    if (!comparison_metrics.empty()) return comparison_metrics;
    return {"auc", "llpauc", "ndcg", "ndcg@" + std::to_string(K)};
  }
  std::vector<std::string> topks() const {
    if (!topk_metrics.empty()) return topk_metrics;
    return {"precision@" + std::to_string(K), "recall@" + std::to_string(K)};
  }

  void validate() const {
    if (trials < 1) throw ConfigError("trials must be >= 1");
    if (total_items < kMaxSimulatedRank) throw ConfigError("total_items must be >= 200");
    if (min_positives < 1 || max_positives > kMaxSimulatedRank || min_positives > max_positives)
      throw ConfigError("positive-count range must satisfy 1 <= min <= max <= 200");
    if (K < 1) throw ConfigError("K must be >= 1");
    if (!(llpauc_alpha > 0.0 && llpauc_alpha <= 1.0) || !(llpauc_beta > 0.0 && llpauc_beta <= 1.0))
      throw ConfigError("llpauc alpha and beta must lie in (0, 1]");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    SimulatedMetrics probe;
    for (const auto& n : comparisons()) simulated_metric(probe, n, K);
    for (const auto& n : topks()) simulated_metric(probe, n, K);
  }
};

struct PairCount {
  std::string comparison;
  std::string topk;
  std::size_t inconsistent = 0;
  std::size_t valid = 0;
  std::size_t ties_discarded = 0;

  double ratio() const { return valid ? static_cast<double>(inconsistent) / static_cast<double>(valid) : 0.0; }
};

struct InconsistencyReport {
  SimulationConfig config;
  std::vector<PairCount> pairs;

  const PairCount& find(const std::string& comparison, const std::string& topk) const {
    for (const auto& p : pairs)
      if (p.comparison == comparison && p.topk == topk) return p;
    throw std::out_of_range("no metric pair " + comparison + " vs " + topk);
  }

  double mean_ratio(const std::string& comparison) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& p : pairs)
      if (p.comparison == comparison) {
        s += p.ratio();
        ++n;
      }
    return n ? s / static_cast<double>(n) : 0.0;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    const auto& c = config;
    j["config"] = {{"trials", c.trials},
                   {"total_items", c.total_items},
                   {"min_positives", c.min_positives},
                   {"max_positives", c.max_positives},
                   {"K", c.K},
                   {"llpauc_alpha", c.llpauc_alpha},
                   {"llpauc_beta", c.llpauc_beta},
                   {"shared_positive_count", c.shared_positive_count},
                   {"seed", c.seed}};
    auto arr = nlohmann::ordered_json::array();
    for (const auto& p : pairs)
      arr.push_back({{"comparison", p.comparison},
                     {"topk", p.topk},
                     {"ratio", p.ratio()},
                     {"inconsistent", p.inconsistent},
                     {"valid", p.valid},
                     {"ties_discarded", p.ties_discarded}});
    j["pairs"] = arr;
    return j;
  }
};

struct TrialMetrics {
  SimulatedMetrics a, b;
};

inline std::vector<TrialMetrics> simulate_trials(const SimulationConfig& c) {
  c.validate();
  std::vector<TrialMetrics> out(c.trials);
  parallel_chunks(c.trials, c.workers, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t t = b; t < e; ++t) {
      Rng rng(derive_seed(c.seed, {0x51a1ULL, t}));
      auto draw_m = [&] {
        return static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(c.min_positives),
                                                    static_cast<std::int64_t>(c.max_positives)));
      };
      const std::size_t m1 = draw_m();
      const std::size_t m2 = c.shared_positive_count ? m1 : draw_m();
      const auto r1 = sample_ranking(rng, c.total_items, m1);
      const auto r2 = sample_ranking(rng, c.total_items, m2);
      out[t] = {metrics_from_ranking(r1, c.K, c.llpauc_alpha, c.llpauc_beta),
                metrics_from_ranking(r2, c.K, c.llpauc_alpha, c.llpauc_beta)};
    }
  });
  return out;
}

/// Counts trials where a comparison metric and a Top-K metric strictly order the two
/// lists in opposite directions; trials with a tie in either metric are excluded.
inline InconsistencyReport count_inconsistencies(const SimulationConfig& c,
                                                 const std::vector<TrialMetrics>& trials) {
  InconsistencyReport rep;
  rep.config = c;
  for (const auto& cmp : c.comparisons())
    for (const auto& top : c.topks()) {
      PairCount p{cmp, top};
      for (const auto& t : trials) {
        const double ca = simulated_metric(t.a, cmp, c.K), cb = simulated_metric(t.b, cmp, c.K);
        const double ta = simulated_metric(t.a, top, c.K), tb = simulated_metric(t.b, top, c.K);
        if (ca == cb || ta == tb) {
          ++p.ties_discarded;
          continue;
        }
        ++p.valid;
        if ((ca > cb) != (ta > tb)) ++p.inconsistent;
      }
      rep.pairs.push_back(p);
    }
  return rep;
}

inline InconsistencyReport run_inconsistency(const SimulationConfig& c) {
  return count_inconsistencies(c, simulate_trials(c));
}

inline void write_trials_tsv(std::ostream& out, const std::vector<TrialMetrics>& trials) {
  out << "trial\tlist\tprecision\trecall\tndcg_at_k\tndcg\tauc\tllpauc\n";
  for (std::size_t t = 0; t < trials.size(); ++t)
    for (int side = 0; side < 2; ++side) {
      const auto& m = side == 0 ? trials[t].a : trials[t].b;
      out << t << '\t' << (side == 0 ? 'a' : 'b') << '\t' << m.precision << '\t' << m.recall
          << '\t' << m.ndcg_at_k << '\t' << m.ndcg << '\t' << m.auc << '\t' << m.llpauc << '\n';
    }
}

}  // namespace talos
