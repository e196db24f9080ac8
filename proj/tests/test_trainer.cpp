#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "support/toy.hpp"
#include "talos/config.hpp"
#include "talos/trainer.hpp"

using namespace talos;
using talos::testing::toy_config;
using talos::testing::toy_planted;

namespace {

// Small IID-split dataset with validation positives.
InteractionDataset small_split() {
  std::ostringstream s;
  for (int u = 0; u < 30; ++u)
    for (int k = 0; k < 12; ++k) s << "u" << u << " i" << (u * 5 + k * 7) % 60 << '\n';
  std::istringstream in(s.str());
  SplitConfig c;
  c.core = 0;
  c.min_rating.reset();
  return split_iid(load_from_stream(in, c), c);
}

TrainConfig small_config() {
  TrainConfig c;
  c.loss.K = 5;
  c.loss.num_negatives = 16;
  c.epochs = 4;
  c.batch_size = 64;
  c.lr = 1e-2;
  c.dim = 8;
  c.eval_cutoffs = {5};
  c.eval_metric = "precision@5";
  c.seed = 3;
  return c;
}

std::vector<double> losses(const TrainLog& log) {
  std::vector<double> v;
  for (const auto& e : log.epochs) v.push_back(e.mean_loss);
  return v;
}

}  // namespace

TEST(Trainer, PatienceOneStopsAfterTwoEpochs) {
  auto d = small_split();
  auto c = small_config();
  c.epochs = 10;
  c.patience = 1;
  c.lr = 1e-12;  // rankings cannot move, so the metric never improves after epoch 1
  auto r = train(d, c);
  EXPECT_EQ(r.log.epochs.size(), 2u);
  EXPECT_TRUE(r.log.stopped_early);
  EXPECT_EQ(r.log.best_epoch, 1u);
}

TEST(Trainer, SameSeedSameLog) {
  auto d = small_split();
  auto c = small_config();
  auto a = train(d, c), b = train(d, c);
  EXPECT_EQ(losses(a.log), losses(b.log));
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.thresholds, b.thresholds);
  c.seed = 4;
  EXPECT_NE(losses(train(d, c).log), losses(a.log));
}

TEST(Trainer, WorkerCountDoesNotChangeResults) {
  auto d = small_split();
  auto c = small_config();
  auto a = train(d, c);
  c.workers = 3;
  auto b = train(d, c);
  EXPECT_EQ(losses(a.log), losses(b.log));
  EXPECT_EQ(a.model, b.model);
}

TEST(Trainer, ReturnsBestValidationState) {
  auto d = small_split();
  auto c = small_config();
  c.epochs = 6;
  auto r = train(d, c);
  ASSERT_GE(r.log.best_epoch, 1u);
  const auto& best = r.log.epochs[r.log.best_epoch - 1];
  ASSERT_TRUE(best.validation.has_value());
  MetricOptions o;
  o.cutoffs = {5};
  o.pairwise = false;
  EXPECT_DOUBLE_EQ(evaluate(r.model, d, Split::validation, o).at("precision@5"),
                   best.validation->at("precision@5"));
  EXPECT_EQ(r.log.best_metric, best.validation->at("precision@5"));
}

TEST(Trainer, LogRecordsEveryEpochContiguously) {
  auto d = small_split();
  auto r = train(d, small_config());
  for (std::size_t k = 0; k < r.log.epochs.size(); ++k) {
    EXPECT_EQ(r.log.epochs[k].epoch, k + 1);
    EXPECT_GE(r.log.epochs[k].seconds, 0.0);
  }
  std::ostringstream out;
  r.log.write_json_lines(out, small_config());
  std::istringstream in(out.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    if (n == 0) {
      EXPECT_EQ(j["threshold_update"], "per-batch");
    }
    ++n;
  }
  EXPECT_EQ(n, r.log.epochs.size() + 2);
}

TEST(Trainer, AlternationContract) {
  auto d = small_split();
  auto c = small_config();
  c.epochs = 2;
  std::vector<double> before = Trainer(d, c).initial_state().thresholds.beta;
  std::size_t batches = 0;
  TrainHooks hooks;
  hooks.on_batch = [&](const BatchTrace& t) {
    ++batches;
    ASSERT_EQ(t.users.size(), t.beta_seen_by_loss.size());
    ASSERT_EQ(t.users.size(), t.threshold_positive_scores.size());
    for (std::size_t k = 0; k < t.users.size(); ++k) {
      // Loss step read the table as it stood before the batch.
      EXPECT_EQ(t.beta_seen_by_loss[k], before[t.users[k]]);
      // Threshold step consumed scores from the updated model.
      EXPECT_NEAR(t.threshold_positive_scores[k], score(*t.model, t.users[k], t.positives[k]),
                  1e-12);
      for (std::size_t j = 0; j < t.negatives[k].size(); ++j)
        EXPECT_NEAR(t.threshold_negative_scores[k][j],
                    score(*t.model, t.users[k], t.negatives[k][j]), 1e-12);
      // Shared sample: no negative is a training positive.
      const auto pos = d.positives(Split::train, t.users[k]);
      for (Index i : t.negatives[k])
        EXPECT_FALSE(std::binary_search(pos.begin(), pos.end(), i));
    }
    before = t.thresholds->beta;
  };
  Trainer(d, c, hooks).train();
  EXPECT_GT(batches, 2u);
}

TEST(Trainer, BprUsesOneNegative) {
  auto d = small_split();
  auto c = small_config();
  c.loss.family = LossFamily::bpr;
  c.epochs = 1;
  TrainHooks hooks;
  hooks.on_batch = [](const BatchTrace& t) {
    for (const auto& n : t.negatives) EXPECT_EQ(n.size(), 1u);
    EXPECT_TRUE(t.threshold_positive_scores.empty());
  };
  Trainer(d, c, hooks).train();
}

TEST(Trainer, NegativeCountClampedToAvailable) {
  auto d = toy_planted();
  auto c = toy_config(LossFamily::talos, 0.1, 1);
  c.loss.num_negatives = 1024;
  TrainHooks hooks;
  hooks.on_batch = [](const BatchTrace& t) {
    for (const auto& n : t.negatives) EXPECT_EQ(n.size(), 17u);
  };
  Trainer(d, c, hooks).train();
}

TEST(Trainer, NonFiniteUpdateAbortsWithCoordinates) {
  auto d = small_split();
  auto c = small_config();
  c.lr = 1e200;
  c.weight_decay = 1e200;
  try {
    train(d, c);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("epoch 1"), std::string::npos) << m;
    EXPECT_NE(m.find("batch"), std::string::npos) << m;
  }
}

TEST(Trainer, ThresholdsCanStartAtInitialQuantile) {
  auto d = small_split();
  auto c = small_config();
  c.beta_init_from_scores = true;
  const auto r = Trainer(d, c).initial_state();
  for (Index u = 0; u < d.num_users(); ++u) {
    std::vector<double> s(d.num_items());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = score(r.model, u, i);
    EXPECT_NEAR(r.thresholds.beta[u], quantile::exact_quantile(s, 5), 1e-12);
  }
  EXPECT_EQ(r.thresholds.optimizer, ThresholdOptimizer::sgd);
}

TEST(Trainer, ThresholdKeysParse) {
  RunConfig rc;
  rc.set("beta_init", "quantile");
  rc.set("quantile_optimizer", "adam");
  const auto c = rc.train_config();
  EXPECT_TRUE(c.beta_init_from_scores);
  EXPECT_EQ(c.quantile_optimizer, ThresholdOptimizer::adam);
  rc.set("quantile_optimizer", "momentum");
  EXPECT_THROW(rc.train_config(), ConfigError);
  rc.set("quantile_optimizer", "sgd");
  rc.set("beta_init", "high");
  EXPECT_THROW(rc.train_config(), ConfigError);
}

TEST(Trainer, ConfigValidation) {
  auto d = small_split();
  auto c = small_config();
  c.patience = 0;
  EXPECT_THROW(train(d, c), ConfigError);
  c = small_config();
  c.batch_size = 0;
  EXPECT_THROW(train(d, c), ConfigError);
  c = small_config();
  c.loss.K = 60;  // K must be below |I|
  EXPECT_THROW(train(d, c), std::invalid_argument);
}

TEST(ToyInstance, TalosRecoversPlantedPositives) {
  auto r = train(toy_planted(), toy_config(LossFamily::talos));
  EXPECT_LE(r.log.epochs.size(), 200u);
  for (Index u = 0; u < 4; ++u) {
    const auto top = top_k_items(r.model, u, 3);
    const auto planted = talos::testing::planted_positives(u);
    int hits = 0;
    for (Index i : top) hits += std::count(planted.begin(), planted.end(), i);
    EXPECT_GE(hits, 2) << "user " << u;
  }
}

TEST(ToyInstance, GradientNormDecays) {
  auto r = train(toy_planted(), toy_config(LossFamily::talos));
  const auto& e = r.log.epochs;
  const std::size_t tenth = e.size() / 10;
  double first = 0.0, last = 0.0;
  for (std::size_t k = 0; k < tenth; ++k) {
    first += e[k].mean_grad_norm_sq;
    last += e[e.size() - 1 - k].mean_grad_norm_sq;
  }
  EXPECT_LT(last, 0.2 * first);
}

TEST(ToyInstance, NoNanAtSmallTemperature) {
  auto r = train(toy_planted(), toy_config(LossFamily::talos, 0.05));
  for (const auto& e : r.log.epochs) {
    EXPECT_TRUE(std::isfinite(e.mean_loss));
    EXPECT_TRUE(std::isfinite(e.mean_grad_norm_sq));
  }
  for (double b : r.thresholds.beta) EXPECT_TRUE(std::isfinite(b));
}

TEST(ToyInstance, DenominatorPreventsInflation) {
  auto full = train(toy_planted(), toy_config(LossFamily::talos));
  auto wo = train(toy_planted(), toy_config(LossFamily::talos_wo_denominator));
  EXPECT_LT(talos::testing::planted_precision_at_3(wo.model),
            talos::testing::planted_precision_at_3(full.model));
  for (const auto& e : full.log.epochs)
    EXPECT_FALSE(e.mean_positive_score > 0.95 && e.beta.mean > 0.95) << "epoch " << e.epoch;
}

TEST(Sampling, FullCountReturnsEveryNegative) {
  auto d = InteractionDataset::all_train(1, 12, {{0, 2}, {0, 5}});
  Rng rng(1);
  auto g = sample_negatives(d, 0, 10, rng);
  std::set<Index> got(g.items.begin(), g.items.end());
  EXPECT_EQ(got, (std::set<Index>{0, 1, 3, 4, 6, 7, 8, 9, 10, 11}));
  EXPECT_EQ(g.weight, 1.0);
  EXPECT_THROW(sample_negatives(d, 0, 11, rng), std::invalid_argument);
  EXPECT_THROW(sample_negatives(d, 0, 0, rng), std::invalid_argument);
}

TEST(Sampling, NeverReturnsPositives) {
  auto d = InteractionDataset::all_train(1, 40, {{0, 1}, {0, 7}, {0, 8}, {0, 30}});
  Rng rng(2);
  for (int t = 0; t < 1000; ++t)
    for (Index i : sample_negatives(d, 0, 1 + t % 36, rng).items)
      EXPECT_TRUE(i != 1 && i != 7 && i != 8 && i != 30);
}

TEST(Sampling, InclusionFrequencyMatchesBinomial) {
  auto d = InteractionDataset::all_train(1, 50, {{0, 0}, {0, 1}, {0, 2}, {0, 3}, {0, 4}});
  // Both sampler paths: rejection (count 8) and explicit pool (count 30).
  for (std::size_t count : {8u, 30u}) {
    Rng rng(derive_seed(5, {count}));
    std::vector<std::size_t> hits(50, 0);
    const std::size_t trials = 10000;
    for (std::size_t t = 0; t < trials; ++t)
      for (Index i : sample_negatives(d, 0, count, rng).items) ++hits[i];
    const double p = static_cast<double>(count) / 45.0;
    const double sd = std::sqrt(trials * p * (1 - p));
    for (Index i = 5; i < 50; ++i)
      EXPECT_LT(std::abs(static_cast<double>(hits[i]) - trials * p), 3.5 * sd)
          << "item " << i << " count " << count;
  }
}

TEST(Evaluate, PerfectOracleScores) {
  // Each user's test positives get distinct scores near 1; every other item scores 0.
  InteractionDataset d = [] {
    std::ostringstream s;
    for (int u = 0; u < 3; ++u)
      for (int k = 0; k < 10; ++k) s << "u" << u << " i" << u * 10 + k << '\n';
    std::istringstream in(s.str());
    SplitConfig c;
    c.core = 0;
    c.min_rating.reset();
    return split_iid(load_from_stream(in, c), c);
  }();
  // User u points along axis u; its test positives lean toward that axis by distinct amounts.
  const std::size_t extra = d.num_users();
  FactorModel m{Matrix(d.num_users(), extra + 1), Matrix(d.num_items(), extra + 1), 0};
  for (Index u = 0; u < d.num_users(); ++u) m.users(u, u) = 1.0;
  for (Index i = 0; i < d.num_items(); ++i) m.items(i, extra) = 1.0;
  for (Index u = 0; u < d.num_users(); ++u) {
    int k = 0;
    for (Index i : d.positives(Split::test, u)) {
      m.items(i, u) = 1.0;
      m.items(i, extra) = 0.05 * ++k;
    }
  }
  MetricOptions o;
  o.cutoffs = {1, 5};
  auto r = evaluate(m, d, Split::test, o);
  double expect_r1 = 0.0;
  for (Index u = 0; u < d.num_users(); ++u) {
    const double p = static_cast<double>(d.positives(Split::test, u).size());
    expect_r1 += std::min(1.0, p) / p / d.num_users();
  }
  EXPECT_EQ(r.num_users, d.num_users());
  EXPECT_DOUBLE_EQ(r.at("recall@5"), 1.0);
  EXPECT_DOUBLE_EQ(r.at("recall@1"), expect_r1);
  std::set<std::string> keys;
  for (const auto& [k, v] : r.values) keys.insert(k);
  EXPECT_EQ(keys, (std::set<std::string>{"auc", "llpauc", "mrr@1", "mrr@5", "ndcg", "ndcg@1",
                                         "ndcg@5", "precision@1", "precision@5", "recall@1",
                                         "recall@5"}));
  o.pairwise = false;
  EXPECT_EQ(evaluate(m, d, Split::test, o).values.size(), 8u);
  EXPECT_THROW(evaluate(m, d, Split::train, o), std::invalid_argument);
}

TEST(Evaluate, TemporalTestMasksValidation) {
  std::ostringstream s;
  int ts = 0;
  for (int u = 0; u < 6; ++u)
    for (int k = 0; k < 25; ++k) s << "u" << u << " i" << (u + k) % 30 << " 5 " << ts++ << '\n';
  std::istringstream in(s.str());
  SplitConfig c;
  c.core = 0;
  c.min_rating.reset();
  c.mode = SplitMode::temporal;
  auto d = split_temporal(load_from_stream(in, c), c);
  auto m = init_model(d.num_users(), d.num_items(), 4, 1);
  MetricOptions o;
  o.cutoffs = {3};
  auto r = evaluate(m, d, Split::test, o);
  // Recompute with train and validation masked by hand.
  NormalizedRows us(m.users), is(m.items);
  MetricAccumulator acc(o);
  std::vector<double> sc;
  for (Index u = 0; u < d.num_users(); ++u) {
    auto rel = d.positives(Split::test, u);
    auto tr = d.positives(Split::train, u);
    if (rel.empty() || tr.empty()) continue;
    score_all_items(us, is, u, sc);
    std::vector<Index> masked(tr.begin(), tr.end());
    for (Index i : d.positives(Split::validation, u)) masked.push_back(i);
    acc.add(RankedEval(sc, rel, masked));
  }
  EXPECT_EQ(r.values, acc.report().values);
}

TEST(Evaluate, RandomModelOnMovieLensIsNearChance) {
  const std::filesystem::path path(TALOS_ML100K);
  if (!std::filesystem::exists(path)) GTEST_SKIP() << "run tools/fetch_movielens.sh first";
  SplitConfig cfg;
  auto d = split(load(path, cfg), cfg);
  auto m = init_model(d.num_users(), d.num_items(), 64, 2024);
  MetricOptions o;
  o.pairwise = false;
  EXPECT_LT(evaluate(m, d, Split::test, o).at("precision@20"), 0.05);
}
