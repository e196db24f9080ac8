#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dataset.hpp"
#include "model.hpp"

namespace talos {

enum class ThresholdOptimizer : std::uint8_t { sgd = 0, adam = 1 };

inline ThresholdOptimizer parse_threshold_optimizer(const std::string& s) {
  if (s == "sgd") return ThresholdOptimizer::sgd;
  if (s == "adam") return ThresholdOptimizer::adam;
  throw std::invalid_argument("unknown threshold optimizer '" + s + "' (sgd | adam)");
}

inline const char* to_string(ThresholdOptimizer o) {
  return o == ThresholdOptimizer::adam ? "adam" : "sgd";
}

/// Per-user Top-K threshold estimates trained on the sampled quantile-regression
/// objective, either by plain SGD or by a per-user scalar Adam (0.9, 0.999, 1e-8).
struct ThresholdTable {
  std::vector<double> beta;
  double learning_rate = 1e-3;
  int K = 20;
  ThresholdOptimizer optimizer = ThresholdOptimizer::sgd;
  std::vector<double> m, v;
  std::vector<std::uint64_t> steps;

  ThresholdTable() = default;
  ThresholdTable(std::size_t num_users, int k, double lr = 1e-3, double init = 0.0,
                 ThresholdOptimizer opt = ThresholdOptimizer::sgd)
      : beta(num_users, init), learning_rate(lr), K(k), optimizer(opt) {
    if (opt == ThresholdOptimizer::adam) {
      m.assign(num_users, 0.0);
      v.assign(num_users, 0.0);
      steps.assign(num_users, 0);
    }
  }

  friend bool operator==(const ThresholdTable&, const ThresholdTable&) = default;
};

/// Uniform negative sample G_u for one user with importance weight
/// w_u = (|I| - |P_u|) / |G_u|.
struct NegativeSample {
  Index user = 0;
  std::vector<Index> items;
  double weight = 1.0;
};

namespace quantile {

inline void check_k(std::size_t K, std::size_t total_items) {
  if (K == 0 || K >= total_items)
    throw std::invalid_argument("quantile: need 0 < K < |I| (K=" + std::to_string(K) +
                                ", |I|=" + std::to_string(total_items) + ")");
}

/// Pinball loss rho_K(x) = (1 - K/|I|)(x)+ + (K/|I|)(-x)+.
inline double rho(double x, std::size_t K, std::size_t total_items) {
  check_k(K, total_items);
  const double q = static_cast<double>(K) / static_cast<double>(total_items);
  return (1.0 - q) * std::max(x, 0.0) + q * std::max(-x, 0.0);
}

/// d rho_K / dx, with subgradient 0 at the kink.
inline double rho_derivative(double x, std::size_t K, std::size_t total_items) {
  const double q = static_cast<double>(K) / static_cast<double>(total_items);
  if (x > 0.0) return 1.0 - q;
  if (x < 0.0) return -q;
  return 0.0;
}

/// K-th largest value (1-based K).
inline double exact_quantile(std::span<const double> scores, std::size_t K) {
  if (K == 0 || K > scores.size())
    throw std::invalid_argument("exact_quantile: K out of range");
  std::vector<double> v(scores.begin(), scores.end());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(K - 1), v.end(),
                   std::greater<>());
  return v[K - 1];
}

/// Per-example stochastic estimate of the full quantile objective: one positive
/// scaled by |P_u| plus the importance-weighted negative sample, all over |I|.
inline double stochastic_loss(double positive_score, std::size_t num_positives,
                              std::span<const double> negative_scores, double weight,
                              double beta, std::size_t K, std::size_t total_items) {
  check_k(K, total_items);
  double s = static_cast<double>(num_positives) * rho(positive_score - beta, K, total_items);
  double n = 0.0;
  for (double x : negative_scores) n += rho(x - beta, K, total_items);
  return (s + weight * n) / static_cast<double>(total_items);
}

/// d(stochastic_loss)/d(beta).
inline double stochastic_loss_grad(double positive_score, std::size_t num_positives,
                                   std::span<const double> negative_scores, double weight,
                                   double beta, std::size_t K, std::size_t total_items) {
  double g = static_cast<double>(num_positives) *
             rho_derivative(positive_score - beta, K, total_items);
  double n = 0.0;
  for (double x : negative_scores) n += rho_derivative(x - beta, K, total_items);
  return -(g + weight * n) / static_cast<double>(total_items);
}

/// Full-item-space objective (1/|I|) sum_i rho_K(s_i - beta). Reference only: the
/// training path uses the sampled estimate.
inline double full_objective(std::span<const double> all_scores, double beta, std::size_t K) {
  check_k(K, all_scores.size());
  double s = 0.0;
  for (double x : all_scores) s += rho(x - beta, K, all_scores.size());
  return s / static_cast<double>(all_scores.size());
}

inline double full_objective_grad(std::span<const double> all_scores, double beta,
                                  std::size_t K) {
  double g = 0.0;
  for (double x : all_scores) g += rho_derivative(x - beta, K, all_scores.size());
  return -g / static_cast<double>(all_scores.size());
}

}  // namespace quantile

/// One optimizer step on beta_u using the sampled objective; returns the new value.
inline double update_threshold(ThresholdTable& table, Index user, double positive_score,
                               std::size_t num_positives, std::span<const double> negative_scores,
                               double weight, std::size_t total_items) {
  const auto K = static_cast<std::size_t>(table.K);
  double& b = table.beta.at(user);
  const double g = quantile::stochastic_loss_grad(positive_score, num_positives, negative_scores,
                                                  weight, b, K, total_items);
  if (table.optimizer == ThresholdOptimizer::sgd) {
    b -= table.learning_rate * g;
    return b;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double& m = table.m.at(user);
  double& v = table.v.at(user);
  const auto t = static_cast<double>(++table.steps.at(user));
  m = b1 * m + (1.0 - b1) * g;
  v = b2 * v + (1.0 - b2) * g * g;
  const double mhat = m / (1.0 - std::pow(b1, t));
  const double vhat = v / (1.0 - std::pow(b2, t));
  b -= table.learning_rate * mhat / (std::sqrt(vhat) + eps);
  return b;
}

struct QuantileErrorReport {
  double mean_abs_error = 0.0;
  double max_abs_error = 0.0;
  int K = 0;
  std::size_t num_users = 0;
};

/// Compares each user's beta to the exact K-th largest score over all items.
/// Users without training positives are skipped.
inline QuantileErrorReport estimation_error_report(const FactorModel& model,
                                                   const ThresholdTable& table,
                                                   const InteractionDataset& data, int K) {
  QuantileErrorReport r;
  r.K = K;
  NormalizedRows items(model.items);
  std::vector<double> scores(model.num_items());
  std::vector<double> u(model.dim());
  double total = 0.0;
  for (Index user = 0; user < data.num_users(); ++user) {
    if (data.has_split() && data.positives(Split::train, user).empty()) continue;
    const auto raw = model.users.row(user);
    const double n = norm(raw);
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = n > 0.0 ? raw[k] / n : 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = dot(u, items.unit.row(i));
    const double err =
        std::abs(table.beta.at(user) - quantile::exact_quantile(scores, static_cast<std::size_t>(K)));
    total += err;
    r.max_abs_error = std::max(r.max_abs_error, err);
    ++r.num_users;
  }
  if (r.num_users > 0) r.mean_abs_error = total / static_cast<double>(r.num_users);
  return r;
}

}  // namespace talos
