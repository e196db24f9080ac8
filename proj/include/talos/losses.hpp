#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"

namespace talos {

enum class LossFamily {
  talos,
  softmax,
  bpr,
  talos_wo_quantile,
  talos_wo_outside,
  talos_wo_denominator,
};

inline constexpr LossFamily kAllLossFamilies[] = {
    LossFamily::talos,          LossFamily::softmax,           LossFamily::bpr,
    LossFamily::talos_wo_quantile, LossFamily::talos_wo_outside, LossFamily::talos_wo_denominator};

inline std::string_view to_string(LossFamily f) {
  switch (f) {
    case LossFamily::talos: return "talos";
    case LossFamily::softmax: return "softmax";
    case LossFamily::bpr: return "bpr";
    case LossFamily::talos_wo_quantile: return "talos_wo_quantile";
    case LossFamily::talos_wo_outside: return "talos_wo_outside";
    case LossFamily::talos_wo_denominator: return "talos_wo_denominator";
  }
  return "?";
}

inline std::optional<LossFamily> parse_loss_family(std::string_view s) {
  for (auto f : kAllLossFamilies)
    if (to_string(f) == s) return f;
  if (s == "sl") return LossFamily::softmax;
  return std::nullopt;
}

struct LossSpec {
  LossFamily family = LossFamily::talos;
  double tau = 0.1;
  int K = 20;
  std::size_t num_negatives = 1024;
  double epsilon_log = 1e-6;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be > 0");
    if (K < 1) throw ConfigError("K must be >= 1");
    if (num_negatives < 1) throw ConfigError("num_negatives must be >= 1");
    if (!(epsilon_log > 0.0)) throw ConfigError("epsilon_log must be > 0");
  }

  /// Whether the loss reads a learned per-user threshold.
  bool uses_threshold() const {
    return family == LossFamily::talos || family == LossFamily::talos_wo_outside ||
           family == LossFamily::talos_wo_denominator;
  }
};

namespace loss {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

/// sigma_tau(x) = sigmoid(x)^(1/tau), evaluated as exp(log_sigmoid(x)/tau).
inline double sigma_tau(double x, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("sigma_tau: tau must be > 0");
  return std::exp(log_sigmoid(x) / tau);
}

inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

struct ExampleResult {
  double value = 0.0;
  double grad_positive = 0.0;
};

namespace detail {

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value in ") + what);
}

// -log( f(x_i) / sum_j f(x_j) ) where log f is `log_act` and d log f / dx is `dlog_act`.
// The negatives' log-activations are staged in `grad_negatives` before being turned
// into gradients.
template <typename LogAct, typename DLogAct>
ExampleResult ratio_loss(double x_pos, std::span<const double> x_negs,
                         std::span<double> grad_negatives, LogAct log_act, DLogAct dlog_act) {
  if (x_negs.empty()) throw std::invalid_argument("loss needs at least one negative");
  for (std::size_t j = 0; j < x_negs.size(); ++j) grad_negatives[j] = log_act(x_negs[j]);
  const double lse = log_sum_exp(grad_negatives);
  ExampleResult r;
  r.value = -log_act(x_pos) + lse;
  r.grad_positive = -dlog_act(x_pos);
  for (std::size_t j = 0; j < x_negs.size(); ++j)
    grad_negatives[j] = std::exp(grad_negatives[j] - lse) * dlog_act(x_negs[j]);
  require_finite(r.value, "ratio loss");
  return r;
}

}  // namespace detail

/// Loss value and d(loss)/d(score) for one (positive, sampled negatives) example.
/// `beta` is treated as a constant. `grad_negatives` must have negatives.size() slots.
inline ExampleResult evaluate_example(const LossSpec& spec, double positive,
                                      std::span<const double> negatives, double beta,
                                      std::span<double> grad_negatives) {
  if (grad_negatives.size() != negatives.size())
    throw std::invalid_argument("gradient buffer size mismatch");
  const double tau = spec.tau;
  const double inv_tau = 1.0 / tau;
  std::vector<double> shifted;
  auto shift = [&](double b) {
    shifted.resize(negatives.size());
    for (std::size_t j = 0; j < negatives.size(); ++j) shifted[j] = negatives[j] - b;
    return std::span<const double>(shifted);
  };
  auto outside_log = [inv_tau](double x) { return inv_tau * log_sigmoid(x); };
  auto outside_dlog = [inv_tau](double x) { return inv_tau * sigmoid(-x); };

  switch (spec.family) {
    case LossFamily::talos:
      return detail::ratio_loss(positive - beta, shift(beta), grad_negatives, outside_log,
                                outside_dlog);
    case LossFamily::talos_wo_quantile:
      return detail::ratio_loss(positive, shift(0.0), grad_negatives, outside_log, outside_dlog);
    case LossFamily::talos_wo_outside:
      return detail::ratio_loss(
          positive - beta, shift(beta), grad_negatives,
          [inv_tau](double x) { return log_sigmoid(x * inv_tau); },
          [inv_tau](double x) { return inv_tau * sigmoid(-x * inv_tau); });
    case LossFamily::talos_wo_denominator: {
      const double x = positive - beta;
      ExampleResult r{-outside_log(x) + std::log(static_cast<double>(spec.K)), -outside_dlog(x)};
      std::fill(grad_negatives.begin(), grad_negatives.end(), 0.0);
      detail::require_finite(r.value, "w/o-denominator loss");
      return r;
    }
    case LossFamily::softmax: {
      // Denominator holds the positive and every sampled negative.
      for (std::size_t j = 0; j < negatives.size(); ++j) grad_negatives[j] = negatives[j] * inv_tau;
      const double zp = positive * inv_tau;
      const double m = std::max(zp, negatives.empty() ? zp
                                                      : *std::max_element(grad_negatives.begin(),
                                                                          grad_negatives.end()));
      double s = std::exp(zp - m);
      for (double z : grad_negatives) s += std::exp(z - m);
      const double lse = m + std::log(s);
      ExampleResult r{-zp + lse, inv_tau * (std::exp(zp - lse) - 1.0)};
      for (double& z : grad_negatives) z = inv_tau * std::exp(z - lse);
      detail::require_finite(r.value, "softmax loss");
      return r;
    }
    case LossFamily::bpr: {
      if (negatives.empty()) throw std::invalid_argument("bpr needs a negative");
      // Mean over negatives; with the usual single negative this is -log sigmoid(s_i - s_j).
      const double n = static_cast<double>(negatives.size());
      ExampleResult r;
      for (std::size_t j = 0; j < negatives.size(); ++j) {
        const double d = positive - negatives[j];
        r.value -= log_sigmoid(d) / n;
        const double g = sigmoid(-d) / n;
        r.grad_positive -= g;
        grad_negatives[j] = g;
      }
      detail::require_finite(r.value, "bpr loss");
      return r;
    }
  }
  throw std::logic_error("unknown loss family");
}

}  // namespace loss

/// One training example as seen by the loss step.
struct LossExample {
  Index user = 0;
  Index positive_item = 0;
  double positive_score = 0.0;
  std::vector<double> negative_scores;
  double beta = 0.0;
  std::size_t num_positives = 1;
};

using LossBatchInput = std::vector<LossExample>;

struct BatchLoss {
  std::vector<double> values;
  double mean = 0.0;
};

struct BatchGradients {
  std::vector<double> positive;
  std::vector<std::vector<double>> negatives;
};

struct LossWithGradients {
  BatchLoss loss;
  BatchGradients grad;
};

/// Any family, per-example values plus score gradients.
inline LossWithGradients evaluate_batch(const LossBatchInput& batch, const LossSpec& spec) {
  spec.validate();
  LossWithGradients out;
  out.loss.values.reserve(batch.size());
  out.grad.positive.reserve(batch.size());
  out.grad.negatives.reserve(batch.size());
  for (const auto& ex : batch) {
    std::vector<double> g(ex.negative_scores.size());
    const auto r = loss::evaluate_example(spec, ex.positive_score, ex.negative_scores, ex.beta, g);
    out.loss.values.push_back(r.value);
    out.grad.positive.push_back(r.grad_positive);
    out.grad.negatives.push_back(std::move(g));
  }
  double s = 0.0;
  for (double v : out.loss.values) s += v;
  out.loss.mean = batch.empty() ? 0.0 : s / static_cast<double>(batch.size());
  return out;
}

namespace detail {
inline void require_family(const LossSpec& spec, std::initializer_list<LossFamily> allowed,
                           const char* op) {
  for (auto f : allowed)
    if (spec.family == f) return;
  throw std::invalid_argument(std::string(op) + ": wrong loss family " +
                              std::string(to_string(spec.family)));
}
}  // namespace detail

/// Per-positive Talos: -log( sigma_tau(s_i - beta) / sum_{j in G} sigma_tau(s_j - beta) ).
inline BatchLoss talos_loss(const LossBatchInput& batch, const LossSpec& spec) {
  detail::require_family(spec, {LossFamily::talos}, "talos_loss");
  return evaluate_batch(batch, spec).loss;
}

/// d(talos_loss)/d(scores); no gradient flows to beta.
inline BatchGradients talos_grad(const LossBatchInput& batch, const LossSpec& spec) {
  detail::require_family(spec, {LossFamily::talos}, "talos_grad");
  return evaluate_batch(batch, spec).grad;
}

inline LossWithGradients softmax_loss(const LossBatchInput& batch, const LossSpec& spec) {
  detail::require_family(spec, {LossFamily::softmax}, "softmax_loss");
  return evaluate_batch(batch, spec);
}

inline LossWithGradients ablation_losses(const LossBatchInput& batch, const LossSpec& spec) {
  detail::require_family(spec,
                         {LossFamily::talos_wo_quantile, LossFamily::talos_wo_outside,
                          LossFamily::talos_wo_denominator},
                         "ablation_losses");
  return evaluate_batch(batch, spec);
}

struct BprResult {
  double value = 0.0;
  double grad_positive = 0.0;
  double grad_negative = 0.0;
};

/// -log sigmoid(s_i - s_j).
inline BprResult bpr_loss(double positive_score, double negative_score) {
  const double d = positive_score - negative_score;
  const double g = loss::sigmoid(-d);
  return {-loss::log_sigmoid(d), -g, g};
}

/// Sum-inside-log Talos over a user's positives and a candidate set:
/// -log( sum_P sigma_tau(s - beta) / sum_C sigma_tau(s - beta) ).
inline double talos_full_form(std::span<const double> positive_scores,
                              std::span<const double> candidate_scores, double beta, double tau) {
  if (positive_scores.empty()) throw std::invalid_argument("talos_full_form: no positives");
  auto log_terms = [&](std::span<const double> s) {
    std::vector<double> v(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) v[k] = loss::log_sigmoid(s[k] - beta) / tau;
    return loss::log_sum_exp(v);
  };
  return -log_terms(positive_scores) + log_terms(candidate_scores);
}

}  // namespace talos
