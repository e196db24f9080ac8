#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "json.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "quantile.hpp"
#include "random.hpp"
#include "sampling.hpp"

namespace talos {

struct TrainConfig {
  LossSpec loss;
  std::size_t epochs = 300;
  std::size_t batch_size = 1024;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t dim = 64;
  double init_stddev = 0.1;
  double quantile_lr = 1e-3;
  double beta_init = 0.0;
  /// Start each threshold at the exact K-th score of the initial model instead of beta_init.
  bool beta_init_from_scores = false;
  ThresholdOptimizer quantile_optimizer = ThresholdOptimizer::sgd;
  std::vector<std::size_t> eval_cutoffs{20};
  std::size_t patience = 25;
  std::string eval_metric = "precision@20";
  std::uint64_t seed = 2024;
  std::size_t workers = 1;
  bool verbose = false;

  void validate() const {
    loss.validate();
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (dim < 1) throw ConfigError("dim must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(quantile_lr > 0.0)) throw ConfigError("quantile_lr must be > 0");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (eval_cutoffs.empty()) throw ConfigError("eval_cutoffs must not be empty");
    for (auto k : eval_cutoffs)
      if (k < 1) throw ConfigError("eval cutoffs must be >= 1");
  }

  /// Negatives drawn per example; BPR always uses one.
  std::size_t negatives_per_example() const {
    return loss.family == LossFamily::bpr ? 1 : loss.num_negatives;
  }
};

struct BetaSummary {
  double mean = 0.0, stddev = 0.0, min = 0.0, max = 0.0;
};

inline BetaSummary summarize(const std::vector<double>& v) {
  BetaSummary s;
  if (v.empty()) return s;
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.stddev += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(v.size()));
  return s;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  /// Mean over batches of the squared parameter-gradient norm.
  double mean_grad_norm_sq = 0.0;
  /// Mean over examples of the squared score-gradient norm.
  double mean_score_grad_norm_sq = 0.0;
  double mean_positive_score = 0.0;
  BetaSummary beta;
  std::optional<MetricReport> validation;
  /// Wall time of the epoch including validation, and of the training pass alone.
  double seconds = 0.0;
  double train_seconds = 0.0;
  std::size_t batches = 0;
  bool improved = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["mean_loss"] = mean_loss;
    j["mean_grad_norm_sq"] = mean_grad_norm_sq;
    j["mean_score_grad_norm_sq"] = mean_score_grad_norm_sq;
    j["mean_positive_score"] = mean_positive_score;
    j["beta"] = {{"mean", beta.mean}, {"std", beta.stddev}, {"min", beta.min}, {"max", beta.max}};
    j["validation"] = validation ? validation->to_json() : nlohmann::ordered_json();
    j["seconds"] = seconds;
    j["train_seconds"] = train_seconds;
    j["batches"] = batches;
    j["improved"] = improved;
    return j;
  }
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  bool stopped_early = false;
  std::string threshold_update = "per-batch";

  nlohmann::ordered_json header_json(const TrainConfig& c) const {
    nlohmann::ordered_json j;
    j["type"] = "header";
    j["loss"] = std::string(to_string(c.loss.family));
    j["tau"] = c.loss.tau;
    j["K"] = c.loss.K;
    j["num_negatives"] = c.negatives_per_example();
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["dim"] = c.dim;
    j["quantile_lr"] = c.quantile_lr;
    j["quantile_optimizer"] = to_string(c.quantile_optimizer);
    if (c.beta_init_from_scores) j["beta_init"] = "quantile";
    else j["beta_init"] = c.beta_init;
    j["seed"] = c.seed;
    j["threshold_update"] = threshold_update;
    return j;
  }

  void write_json_lines(std::ostream& out, const TrainConfig& c) const {
    out << header_json(c).dump() << '\n';
    for (const auto& e : epochs) out << e.to_json().dump() << '\n';
    nlohmann::ordered_json s;
    s["type"] = "summary";
    s["best_epoch"] = best_epoch;
    s["best_metric"] = best_metric;
    s["stopped_early"] = stopped_early;
    out << s.dump() << '\n';
  }
};

/// Observations from one batch, for instrumentation.
struct BatchTrace {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  std::vector<Index> users;
  std::vector<Index> positives;
  std::vector<std::vector<Index>> negatives;
  /// Thresholds read by the loss step.
  std::vector<double> beta_seen_by_loss;
  /// Scores the threshold step consumed (after the model update).
  std::vector<double> threshold_positive_scores;
  std::vector<std::vector<double>> threshold_negative_scores;
  /// Thresholds after the threshold step.
  std::vector<double> beta_after;
  const FactorModel* model = nullptr;
  const ThresholdTable* thresholds = nullptr;
};

struct TrainHooks {
  std::function<void(const BatchTrace&)> on_batch;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  FactorModel model;
  AdamState adam;
  ThresholdTable thresholds;
  TrainLog log;
};

/// Scores of every item for one user.
inline void score_all_items(const NormalizedRows& users, const NormalizedRows& items, Index user,
                            std::vector<double>& out) {
  out.resize(items.unit.rows());
  const auto u = users.unit.row(user);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dot(u, items.unit.row(i));
}

/// Top-k item indices by score, ties broken by lower index.
inline std::vector<Index> top_k_items(const FactorModel& model, Index user, std::size_t k) {
  std::vector<Index> idx(model.num_items());
  std::vector<double> s(model.num_items());
  for (Index i = 0; i < idx.size(); ++i) {
    idx[i] = i;
    s[i] = score(model, user, i);
  }
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](Index a, Index b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
  idx.resize(k);
  return idx;
}

/// Averages metrics over users with at least one positive in `split` and at least
/// one training positive. Training positives are masked; for test evaluation on a
/// temporal split the validation positives are masked as well.
inline MetricReport evaluate(const FactorModel& model, const InteractionDataset& data, Split split,
                             const MetricOptions& options, std::size_t workers = 1) {
  if (split == Split::train) throw std::invalid_argument("evaluate: use validation or test");
  const NormalizedRows users(model.users), items(model.items);
  const bool mask_validation = split == Split::test && data.metadata().mode == "temporal";
  const std::size_t n = data.num_users();
  std::vector<std::optional<RankedEval>> evals(n);
  parallel_chunks(n, workers, [&](std::size_t, std::size_t b, std::size_t e) {
    std::vector<double> scores;
    std::vector<Index> masked;
    for (std::size_t u = b; u < e; ++u) {
      const auto user = static_cast<Index>(u);
      const auto rel = data.positives(split, user);
      const auto train = data.positives(Split::train, user);
      if (rel.empty() || train.empty()) continue;
      score_all_items(users, items, user, scores);
      masked.assign(train.begin(), train.end());
      if (mask_validation) {
        const auto v = data.positives(Split::validation, user);
        masked.insert(masked.end(), v.begin(), v.end());
      }
      evals[u].emplace(scores, rel, masked);
    }
  });
  MetricAccumulator acc(options);
  for (const auto& e : evals)
    if (e) acc.add(*e);
  auto r = acc.report();
  r.split = std::string(to_string(split));
  return r;
}

namespace detail {

struct ExampleWork {
  std::vector<Index> negatives;
  std::vector<double> negative_scores;
  std::vector<double> grad_negatives;
  double positive_score = 0.0;
  double grad_positive = 0.0;
  double loss = 0.0;
  double weight = 1.0;
};

inline void add_scaled(std::span<double> dst, double a, std::span<const double> x) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += a * x[k];
}

}  // namespace detail

class Trainer {
 public:
  Trainer(const InteractionDataset& data, TrainConfig config, TrainHooks hooks = {})
      : data_(data), cfg_(std::move(config)), hooks_(std::move(hooks)) {
    cfg_.validate();
    if (!data_.has_split()) throw std::invalid_argument("train: dataset has no split");
    if (cfg_.loss.uses_threshold())
      quantile::check_k(static_cast<std::size_t>(cfg_.loss.K), data_.num_items());
  }

  const TrainConfig& config() const { return cfg_; }

  TrainResult initial_state() const {
    TrainResult r;
    r.model = init_model(data_.num_users(), data_.num_items(), cfg_.dim, cfg_.seed,
                         cfg_.init_stddev);
    r.adam = AdamState(r.model, cfg_.lr, cfg_.weight_decay);
    r.thresholds =
        ThresholdTable(data_.num_users(), cfg_.loss.K, cfg_.quantile_lr, cfg_.beta_init,
                       cfg_.quantile_optimizer);
    if (cfg_.beta_init_from_scores && cfg_.loss.uses_threshold()) {
      NormalizedRows users(r.model.users), items(r.model.items);
      std::vector<double> s(data_.num_items());
      for (Index u = 0; u < data_.num_users(); ++u) {
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = dot(users.unit.row(u), items.unit.row(i));
        r.thresholds.beta[u] = quantile::exact_quantile(s, static_cast<std::size_t>(cfg_.loss.K));
      }
    }
    return r;
  }

  TrainResult train() const { return train(initial_state()); }

  /// Alternating optimization with validation-based early stopping. Returns the
  /// state from the best validation epoch (or the last epoch when the dataset has
  /// no validation positives) together with the full log.
  TrainResult train(TrainResult state) const {
    MetricOptions mopts;
    mopts.cutoffs = cfg_.eval_cutoffs;
    mopts.pairwise = false;
    const bool has_validation = data_.count(Split::validation) > 0;

    TrainResult best = state;
    auto& log = state.log;
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      EpochRecord rec = run_epoch(state, epoch);
      rec.train_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (has_validation) {
        auto report = evaluate(state.model, data_, Split::validation, mopts, cfg_.workers);
        report.loss = std::string(to_string(cfg_.loss.family));
        report.tau = cfg_.loss.tau;
        report.seed = cfg_.seed;
        report.epoch = static_cast<long>(epoch);
        const double m = report.at(cfg_.eval_metric);
        rec.validation = std::move(report);
        if (m > log.best_metric) {
          log.best_metric = m;
          log.best_epoch = epoch;
          rec.improved = true;
          since_best = 0;
        } else {
          ++since_best;
        }
      } else {
        rec.improved = true;
        log.best_epoch = epoch;
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.epochs.push_back(rec);
      if (hooks_.on_epoch) hooks_.on_epoch(rec);
      if (cfg_.verbose) std::cerr << rec.to_json().dump() << '\n';
      if (rec.improved) {
        best.model = state.model;
        best.adam = state.adam;
        best.thresholds = state.thresholds;
      }
      if (has_validation && since_best >= cfg_.patience) {
        log.stopped_early = true;
        break;
      }
    }
    best.log = std::move(log);
    return best;
  }

  /// One pass over the shuffled training pairs.
  EpochRecord run_epoch(TrainResult& state, std::size_t epoch) const {
    auto pairs = data_.train_pairs();
    Rng shuffle_rng(derive_seed(cfg_.seed, {0xe90cULL, epoch}));
    shuffle_rng.shuffle(std::span<std::pair<Index, Index>>(pairs));

    NormalizedRows users(state.model.users), items(state.model.items);
    ModelGradients grads(state.model);
    std::vector<detail::ExampleWork> work;
    std::vector<NegativeSampler> samplers(cfg_.workers, NegativeSampler(data_.num_items()));

    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0, grad_sq_sum = 0.0, score_grad_sq_sum = 0.0;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < pairs.size(); start += cfg_.batch_size, ++batch) {
      const std::size_t end = std::min(pairs.size(), start + cfg_.batch_size);
      const std::size_t bsz = end - start;
      work.resize(bsz);
      std::optional<BatchTrace> trace;
      if (hooks_.on_batch) {
        trace.emplace();
        trace->epoch = epoch;
        trace->batch = batch;
      }

      // Loss step: thresholds are read before any update in this batch.
      try {
        parallel_chunks(bsz, cfg_.workers, [&](std::size_t w, std::size_t b, std::size_t e) {
          for (std::size_t k = b; k < e; ++k)
            compute_example(epoch, start + k, pairs[start + k], users, items, state.thresholds,
                            samplers[w], work[k]);
        });
      } catch (const NumericalError& err) {
        throw NumericalError("epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(batch) + ": " + err.what());
      }

      const double scale = 1.0 / static_cast<double>(bsz);
      for (std::size_t k = 0; k < bsz; ++k) {
        const auto [u, i] = pairs[start + k];
        const auto& wk = work[k];
        loss_sum += wk.loss;
        double sg = wk.grad_positive * wk.grad_positive;
        const auto uu = users.unit.row(u);
        auto gu = grads.users.row(u);
        detail::add_scaled(gu, scale * wk.grad_positive, items.unit.row(i));
        detail::add_scaled(grads.items.row(i), scale * wk.grad_positive, uu);
        for (std::size_t j = 0; j < wk.negatives.size(); ++j) {
          const double g = wk.grad_negatives[j];
          sg += g * g;
          if (g == 0.0) continue;
          const Index item = wk.negatives[j];
          detail::add_scaled(gu, scale * g, items.unit.row(item));
          detail::add_scaled(grads.items.row(item), scale * g, uu);
        }
        score_grad_sq_sum += sg;
        if (trace) {
          trace->users.push_back(u);
          trace->positives.push_back(i);
          trace->negatives.push_back(wk.negatives);
          trace->beta_seen_by_loss.push_back(
              cfg_.loss.family == LossFamily::talos_wo_quantile ? 0.0
                                                                : state.thresholds.beta[u]);
        }
      }
      for (auto r : grads.users.touched())
        project_unit_gradient(grads.users.row(r), users.unit.row(r), users.norms[r]);
      for (auto r : grads.items.touched())
        project_unit_gradient(grads.items.row(r), items.unit.row(r), items.norms[r]);
      grad_sq_sum += grads.squared_norm();
      try {
        apply_gradients(state.model, state.adam, grads);
      } catch (const NumericalError& err) {
        throw NumericalError("epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(batch) + ": " + err.what());
      }
      for (auto r : grads.users.touched()) users.refresh(state.model.users, r);
      for (auto r : grads.items.touched()) items.refresh(state.model.items, r);
      grads.clear();

      // Threshold step on post-update scores of the same sampled negatives.
      if (cfg_.loss.uses_threshold()) {
        for (std::size_t k = 0; k < bsz; ++k) {
          const auto [u, i] = pairs[start + k];
          auto& wk = work[k];
          const auto uu = users.unit.row(u);
          const double sp = dot(uu, items.unit.row(i));
          for (std::size_t j = 0; j < wk.negatives.size(); ++j)
            wk.negative_scores[j] = dot(uu, items.unit.row(wk.negatives[j]));
          update_threshold(state.thresholds, u, sp, data_.positives(Split::train, u).size(),
                           wk.negative_scores, wk.weight, data_.num_items());
          if (!std::isfinite(state.thresholds.beta[u]))
            throw NumericalError("epoch " + std::to_string(epoch) + " batch " +
                                 std::to_string(batch) + ": non-finite threshold for user " +
                                 std::to_string(u));
          if (trace) {
            trace->threshold_positive_scores.push_back(sp);
            trace->threshold_negative_scores.push_back(wk.negative_scores);
          }
        }
      }
      if (trace) {
        for (auto u : trace->users) trace->beta_after.push_back(state.thresholds.beta[u]);
        trace->model = &state.model;
        trace->thresholds = &state.thresholds;
        hooks_.on_batch(*trace);
      }
    }
    const auto n = static_cast<double>(std::max<std::size_t>(1, pairs.size()));
    rec.batches = batch;
    rec.mean_loss = loss_sum / n;
    rec.mean_score_grad_norm_sq = score_grad_sq_sum / n;
    rec.mean_grad_norm_sq = batch ? grad_sq_sum / static_cast<double>(batch) : 0.0;
    double ps = 0.0;
    for (const auto& [u, i] : pairs) ps += dot(users.unit.row(u), items.unit.row(i));
    rec.mean_positive_score = ps / n;
    rec.beta = summarize(state.thresholds.beta);
    return rec;
  }

 private:
  void compute_example(std::size_t epoch, std::size_t example_index, std::pair<Index, Index> pair,
                       const NormalizedRows& users, const NormalizedRows& items,
                       const ThresholdTable& thresholds, NegativeSampler& sampler,
                       detail::ExampleWork& wk) const {
    const auto [u, i] = pair;
    const auto pos = data_.positives(Split::train, u);
    const std::size_t available = data_.num_items() - pos.size();
    const std::size_t count = std::min(cfg_.negatives_per_example(), available);
    if (count == 0) throw std::runtime_error("user " + std::to_string(u) + " has no negatives");
    Rng rng(derive_seed(cfg_.seed, {0x5a3dULL, epoch, example_index, pair.first, pair.second}));
    sampler.draw(pos, count, rng, wk.negatives);
    wk.weight = static_cast<double>(available) / static_cast<double>(count);

    const auto uu = users.unit.row(u);
    wk.positive_score = dot(uu, items.unit.row(i));
    wk.negative_scores.resize(count);
    for (std::size_t j = 0; j < count; ++j)
      wk.negative_scores[j] = dot(uu, items.unit.row(wk.negatives[j]));
    wk.grad_negatives.resize(count);
    const auto r = loss::evaluate_example(cfg_.loss, wk.positive_score, wk.negative_scores,
                                          thresholds.beta[u], wk.grad_negatives);
    wk.loss = r.value;
    wk.grad_positive = r.grad_positive;
  }

  const InteractionDataset& data_;
  TrainConfig cfg_;
  TrainHooks hooks_;
};

inline TrainResult train(const InteractionDataset& data, const TrainConfig& config,
                         TrainHooks hooks = {}) {
  return Trainer(data, config, std::move(hooks)).train();
}

}  // namespace talos
