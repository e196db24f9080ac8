#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "json.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "quantile.hpp"
#include "random.hpp"

namespace talos {

struct TauRange {
  double min = 0.0;
  double max = 0.0;
};

/// Admissible temperatures for the Precision@K bound under log(0) := log(eps):
/// tau_min = log((e^2+2)·sigmoid(-2)/2)/log eps, tau_max = log(1/2)/log eps.
inline TauRange tau_range(double epsilon) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon))
    throw ConfigError("epsilon_log must be a finite value > 0");
  if (epsilon == 1.0) throw ConfigError("epsilon_log = 1 leaves the tau range undefined");
  const double le = std::log(epsilon);
  const double e2 = std::exp(2.0);
  TauRange r{std::log((e2 + 2.0) * loss::sigmoid(-2.0) / 2.0) / le, std::log(0.5) / le};
  if (!(r.min < r.max))
    throw ConfigError("empty tau range: tau_min " + std::to_string(r.min) + " >= tau_max " +
                      std::to_string(r.max) + " (epsilon_log " + std::to_string(epsilon) + ")");
  return r;
}

/// C = (1/tau)·log(1 + e^2/2).
inline double bound_constant(double tau) { return std::log1p(std::exp(2.0) / 2.0) / tau; }

struct CheckResult {
  std::string name;
  bool passed = false;
  /// Check-specific figure of merit (minimum slack, maximum error, ...).
  double margin = 0.0;
  nlohmann::ordered_json detail = nlohmann::ordered_json::object();
};

struct BoundCheckConfig {
  double epsilon_log = 1e-6;
  std::size_t trials = 1000;
  std::size_t num_items = 100;
  std::size_t K = 10;
  std::size_t max_positives = 20;
  std::uint64_t seed = 2024;

  void validate() const {
    tau_range(epsilon_log);
    if (trials < 1) throw ConfigError("trials must be >= 1");
    if (K < 1 || K >= num_items) throw ConfigError("need 1 <= K < num_items");
    if (max_positives < 1 || max_positives > num_items)
      throw ConfigError("max_positives must lie in [1, num_items]");
  }
};

struct BoundInstance {
  std::vector<double> scores;
  std::vector<Index> positives;
  double tau = 0.0;
  double beta = 0.0;
};

struct BoundEvaluation {
  double neg_log_precision = 0.0;
  double talos = 0.0;
  double constant = 0.0;

  double slack() const { return talos + constant - neg_log_precision; }
};

/// Random scores in [-1, 1], a random positive set, and beta at the exact K-th quantile.
inline BoundInstance make_bound_instance(const BoundCheckConfig& c, std::size_t trial,
                                         std::optional<double> tau = std::nullopt) {
  Rng rng(derive_seed(c.seed, {0x7e01ULL, trial}));
  BoundInstance in;
  in.scores.resize(c.num_items);
  for (double& s : in.scores) s = rng.uniform(-1.0, 1.0);
  const auto np = static_cast<std::size_t>(rng.between(1, static_cast<std::int64_t>(c.max_positives)));
  std::vector<Index> idx(c.num_items);
  std::iota(idx.begin(), idx.end(), Index{0});
  for (std::size_t k = 0; k < np; ++k) std::swap(idx[k], idx[k + rng.below(idx.size() - k)]);
  in.positives.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(np));
  std::sort(in.positives.begin(), in.positives.end());
  const auto range = tau_range(c.epsilon_log);
  in.tau = tau ? *tau : rng.uniform(range.min, range.max);
  in.beta = quantile::exact_quantile(in.scores, c.K);
  return in;
}

inline BoundEvaluation evaluate_bound(const BoundInstance& in, std::size_t K, double epsilon) {
  const RankedEval e(in.scores, in.positives);
  const double precision = precision_recall_at_k(e, K).first;
  BoundEvaluation r;
  r.neg_log_precision = -std::log(precision > 0.0 ? precision : epsilon);
  std::vector<double> pos;
  for (Index i : in.positives) pos.push_back(in.scores[i]);
  r.talos = talos_full_form(pos, in.scores, in.beta, in.tau);
  r.constant = bound_constant(in.tau);
  return r;
}

/// -log Precision@K <= L_Talos + C over random instances.
inline CheckResult check_theorem1(const BoundCheckConfig& c) {
  c.validate();
  CheckResult res{"precision_bound"};
  double min_slack = std::numeric_limits<double>::infinity(), sum = 0.0;
  std::size_t violations = 0;
  nlohmann::ordered_json first_violation;
  for (std::size_t t = 0; t < c.trials; ++t) {
    const auto in = make_bound_instance(c, t);
    const auto ev = evaluate_bound(in, c.K, c.epsilon_log);
    const double s = ev.slack();
    sum += s;
    if (s < min_slack) min_slack = s;
    if (!(s >= 0.0)) {
      if (violations++ == 0)
        first_violation = {{"trial", t},         {"tau", in.tau},
                           {"beta", in.beta},    {"scores", in.scores},
                           {"positives", in.positives},
                           {"neg_log_precision", ev.neg_log_precision},
                           {"talos", ev.talos}, {"constant", ev.constant}};
    }
  }
  const auto range = tau_range(c.epsilon_log);
  res.passed = violations == 0;
  res.margin = min_slack;
  res.detail = {{"trials", c.trials},        {"violations", violations},
                {"min_slack", min_slack},    {"mean_slack", sum / static_cast<double>(c.trials)},
                {"tau_min", range.min},      {"tau_max", range.max},
                {"epsilon_log", c.epsilon_log}};
  if (violations) res.detail["counterexample"] = first_violation;
  return res;
}

/// Mean slack on a fixed instance set at each of `points` evenly spaced temperatures
/// across the admissible range.
inline std::vector<std::pair<double, double>> bound_slack_by_tau(const BoundCheckConfig& c,
                                                                    std::size_t points) {
  c.validate();
  const auto range = tau_range(c.epsilon_log);
  std::vector<std::pair<double, double>> out;
  for (std::size_t p = 0; p < points; ++p) {
    const double tau = points == 1 ? range.min
                                   : range.min + (range.max - range.min) * static_cast<double>(p) /
                                                     static_cast<double>(points - 1);
    double sum = 0.0;
    for (std::size_t t = 0; t < c.trials; ++t)
      sum += evaluate_bound(make_bound_instance(c, t, tau), c.K, c.epsilon_log).slack();
    out.emplace_back(tau, sum / static_cast<double>(c.trials));
  }
  return out;
}

struct DroCheckConfig {
  std::size_t trials = 1000;
  std::size_t min_negatives = 2;
  std::size_t max_negatives = 64;
  double tau_lo = 0.02;
  double tau_hi = 2.0;
  double identity_tolerance = 1e-9;
  /// Grid check: KL radius, instance count, and tolerance to the closed form.
  double eta = 0.1;
  std::size_t grid_instances = 20;
  std::size_t grid_negatives = 3;
  double grid_tolerance = 1e-3;
  std::uint64_t seed = 2024;

  void validate() const {
    if (trials < 1) throw ConfigError("trials must be >= 1");
    if (min_negatives < 1 || min_negatives > max_negatives)
      throw ConfigError("negative-count range is empty");
    if (!(tau_lo > 0.0 && tau_lo < tau_hi)) throw ConfigError("need 0 < tau_lo < tau_hi");
    if (!(eta > 0.0)) throw ConfigError("eta must be > 0");
    if (grid_negatives != 2 && grid_negatives != 3)
      throw ConfigError("grid check supports 2 or 3 negatives");
  }
};

namespace dro {

/// tau·log E_uniform[exp(g/tau)].
inline double scaled_log_mean_exp(std::span<const double> g, double tau) {
  std::vector<double> z(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) z[j] = g[j] / tau;
  return tau * (loss::log_sum_exp(z) - std::log(static_cast<double>(g.size())));
}

/// Dual value tau·eta + tau·log E[exp(g/tau)]; an upper bound on the KL-ball sup for any tau.
inline double dual_value(std::span<const double> g, double eta, double tau) {
  return tau * eta + scaled_log_mean_exp(g, tau);
}

/// Minimizes the dual over tau by golden-section search on log tau.
inline std::pair<double, double> minimize_dual(std::span<const double> g, double eta) {
  double a = std::log(1e-8), b = std::log(1e4);
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  auto f = [&](double lt) { return dual_value(g, eta, std::exp(lt)); };
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < 200; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = f(d);
    }
  }
  const double lt = (a + b) / 2.0;
  const double best = std::min({f(lt), f(std::log(1e-8)), f(std::log(1e4))});
  return {std::exp(lt), best};
}

inline double kl_to_uniform(std::span<const double> q) {
  const double n = static_cast<double>(q.size());
  double kl = 0.0;
  for (double x : q)
    if (x > 0.0) kl += x * std::log(x * n);
  return kl;
}

/// max E_Q[g] over a simplex grid restricted to KL(Q||uniform) <= eta, refined by
/// repeatedly zooming the grid around the incumbent. Supports 2 or 3 outcomes.
inline double grid_sup(std::span<const double> g, double eta, int levels = 6, int points = 200) {
  const std::size_t n = g.size();
  if (n != 2 && n != 3) throw std::invalid_argument("grid_sup supports 2 or 3 outcomes");
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> center(n - 1, 1.0 / static_cast<double>(n));
  double half = 0.5;
  std::vector<double> q(n);
  auto consider = [&](const std::vector<double>& free) {
    double rest = 1.0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      if (free[k] < 0.0 || free[k] > 1.0) return;
      q[k] = free[k];
      rest -= free[k];
    }
    if (rest < 0.0) return;
    q[n - 1] = rest;
    if (kl_to_uniform(q) > eta) return;
    double v = 0.0;
    for (std::size_t k = 0; k < n; ++k) v += q[k] * g[k];
    if (v > best) {
      best = v;
      center = free;
    }
  };
  for (int level = 0; level < levels; ++level) {
    const auto c0 = center;
    const double step = 2.0 * half / points;
    std::vector<double> free(n - 1);
    for (int a = 0; a <= points; ++a) {
      free[0] = c0[0] - half + step * a;
      if (n == 2) {
        consider(free);
        continue;
      }
      for (int b = 0; b <= points; ++b) {
        free[1] = c0[1] - half + step * b;
        consider(free);
      }
    }
    half = 4.0 * step;
  }
  return best;
}

}  // namespace dro

/// tau·(per-positive Talos with a mean denominator) against the closed-form DRO value,
/// plus a grid search of the KL-ball supremum on tiny instances.
inline CheckResult check_dro_identity(const DroCheckConfig& c) {
  c.validate();
  CheckResult res{"dro_identity"};
  double max_rel = 0.0, max_log_gap_err = 0.0;
  for (std::size_t t = 0; t < c.trials; ++t) {
    Rng rng(derive_seed(c.seed, {0xd120ULL, t}));
    const auto n = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(c.min_negatives),
                                                        static_cast<std::int64_t>(c.max_negatives)));
    const double tau = std::exp(rng.uniform(std::log(c.tau_lo), std::log(c.tau_hi)));
    const double beta = rng.uniform(-1.0, 1.0);
    const double sp = rng.uniform(-1.0, 1.0);
    std::vector<double> sn(n);
    for (double& s : sn) s = rng.uniform(-1.0, 1.0);

    LossSpec spec;
    spec.tau = tau;
    std::vector<double> gbuf(n);
    const double sum_form = loss::evaluate_example(spec, sp, sn, beta, gbuf).value;
    const double mean_form = sum_form - std::log(static_cast<double>(n));
    const double lhs = tau * mean_form;

    // Closed form in extended precision, written directly from log-sigmoid terms.
    auto ls = [](long double x) {
      return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
    };
    const long double lt = tau;
    long double m = -std::numeric_limits<long double>::infinity();
    std::vector<long double> z(n);
    for (std::size_t j = 0; j < n; ++j) {
      z[j] = ls(static_cast<long double>(sn[j]) - beta) / lt;
      m = std::max(m, z[j]);
    }
    long double acc = 0;
    for (auto v : z) acc += std::exp(v - m);
    const long double rhs =
        -ls(static_cast<long double>(sp) - beta) + lt * (m + std::log(acc / static_cast<long double>(n)));
    const double rel = static_cast<double>(std::fabs(lhs - rhs) / std::max<long double>(std::fabs(rhs), 1e-300L));
    max_rel = std::max(max_rel, rel);

    // Sum and mean denominators differ by exactly log|G|.
    std::vector<double> zz(n);
    for (std::size_t j = 0; j < n; ++j) zz[j] = loss::log_sigmoid(sn[j] - beta) / tau;
    const double direct_sum = -loss::log_sigmoid(sp - beta) / tau + loss::log_sum_exp(zz);
    max_log_gap_err = std::max(max_log_gap_err, std::fabs((direct_sum - mean_form) -
                                                          std::log(static_cast<double>(n))) /
                                                    std::max(1.0, std::fabs(direct_sum)));
  }

  double max_grid_gap = 0.0, max_excess = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < c.grid_instances; ++t) {
    Rng rng(derive_seed(c.seed, {0xd121ULL, t}));
    const double beta = rng.uniform(-1.0, 1.0);
    std::vector<double> g(c.grid_negatives);
    for (double& x : g) x = loss::log_sigmoid(rng.uniform(-1.0, 1.0) - beta);
    const auto [tau_star, closed] = dro::minimize_dual(g, c.eta);
    const double sup = dro::grid_sup(g, c.eta);
    max_grid_gap = std::max(max_grid_gap, closed - sup);
    // Weak duality: the grid supremum never exceeds the dual at any temperature.
    for (double tau : {tau_star, 0.05, 0.1, 0.5, 1.0, 5.0})
      max_excess = std::max(max_excess, sup - dro::dual_value(g, c.eta, tau));
  }

  const bool identity_ok = max_rel <= c.identity_tolerance && max_log_gap_err <= 1e-12;
  const bool grid_ok = max_grid_gap <= c.grid_tolerance && max_grid_gap >= -1e-12 &&
                       max_excess <= 1e-12;
  res.passed = identity_ok && grid_ok;
  res.margin = max_rel;
  res.detail = {{"trials", c.trials},
                {"max_relative_error", max_rel},
                {"max_log_gap_error", max_log_gap_err},
                {"grid_instances", c.grid_instances},
                {"grid_negatives", c.grid_negatives},
                {"eta", c.eta},
                {"max_grid_gap", max_grid_gap},
                {"max_weak_duality_excess", max_excess}};
  return res;
}

struct UnbiasednessConfig {
  std::size_t num_items = 500;
  std::size_t num_positives = 20;
  std::size_t K = 20;
  std::size_t sample_size = 32;
  std::size_t draws = 10000;
  std::uint64_t seed = 2024;

  void validate() const {
    quantile::check_k(K, num_items);
    if (num_positives < 1 || num_positives >= num_items)
      throw ConfigError("num_positives must lie in [1, num_items)");
    if (sample_size < 1 || sample_size > num_items - num_positives)
      throw ConfigError("sample_size must lie in [1, |N_u|]");
    if (draws < 2) throw ConfigError("draws must be >= 2");
  }
};

struct UnbiasednessResult {
  double full = 0.0;
  double mean = 0.0;
  double standard_error = 0.0;
  double relative_error = 0.0;
  double z = 0.0;
};

/// Monte-Carlo mean of the sampled quantile objective (uniform positive, uniform
/// negative sample) against the full-item objective on a fixed synthetic user.
inline UnbiasednessResult measure_unbiasedness(const UnbiasednessConfig& c) {
  c.validate();
  Rng rng(derive_seed(c.seed, {0x0b1aULL}));
  std::vector<double> scores(c.num_items);
  for (double& s : scores) s = rng.uniform(-1.0, 1.0);
  // Positives are the highest-index items; their scores get a shift upward.
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < c.num_items; ++i) {
    if (i >= c.num_items - c.num_positives)
      pos.push_back(std::min(1.0, scores[i] + 0.5));
    else
      neg.push_back(scores[i]);
  }
  std::vector<double> all(pos);
  all.insert(all.end(), neg.begin(), neg.end());
  const double beta = quantile::exact_quantile(all, c.K);

  UnbiasednessResult r;
  r.full = quantile::full_objective(all, beta, c.K);
  const double weight = static_cast<double>(neg.size()) / static_cast<double>(c.sample_size);
  std::vector<std::size_t> idx(neg.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<double> sample(c.sample_size);
  double sum = 0.0, sumsq = 0.0;
  for (std::size_t d = 0; d < c.draws; ++d) {
    const double sp = pos[rng.below(pos.size())];
    for (std::size_t k = 0; k < c.sample_size; ++k) {
      std::swap(idx[k], idx[k + rng.below(idx.size() - k)]);
      sample[k] = neg[idx[k]];
    }
    const double v = quantile::stochastic_loss(sp, pos.size(), sample, weight, beta, c.K,
                                               c.num_items);
    sum += v;
    sumsq += v * v;
  }
  const double n = static_cast<double>(c.draws);
  r.mean = sum / n;
  const double var = std::max(0.0, (sumsq - n * r.mean * r.mean) / (n - 1.0));
  r.standard_error = std::sqrt(var / n);
  r.relative_error = std::fabs(r.mean - r.full) / std::fabs(r.full);
  r.z = r.standard_error > 0.0 ? std::fabs(r.mean - r.full) / r.standard_error : 0.0;
  return r;
}

inline CheckResult check_unbiasedness(const UnbiasednessConfig& c) {
  const auto r = measure_unbiasedness(c);
  CheckResult res{"unbiasedness"};
  res.passed = r.z <= 3.0;
  res.margin = r.z;
  res.detail = {{"full_objective", r.full},
                {"monte_carlo_mean", r.mean},
                {"standard_error", r.standard_error},
                {"relative_error", r.relative_error},
                {"z", r.z},
                {"draws", c.draws}};
  return res;
}

}  // namespace talos
