#include <gtest/gtest.h>

#include <cmath>

#include "talos/verify.hpp"

using namespace talos;

TEST(Verify, TauRangeAtDefaultEpsilon) {
  // sigmoid(-2) = 0.11920, (e^2+2)/2·sigmoid(-2) = 0.55961, log = -0.58050, log eps = -13.81551.
  const auto r = tau_range(1e-6);
  EXPECT_NEAR(r.min, 0.58050 / 13.81551, 5e-5);
  EXPECT_NEAR(r.max, std::log(2.0) / -std::log(1e-6), 1e-15);
  EXPECT_NEAR(r.min, 0.0420, 1e-4);
  EXPECT_NEAR(r.max, 0.0502, 1e-4);
  EXPECT_LT(r.min, r.max);
}

TEST(Verify, TauRangeShrinksWithEpsilon) {
  const auto a = tau_range(1e-6), b = tau_range(1e-9);
  EXPECT_LT(b.min, a.min);
  EXPECT_LT(b.max, a.max);
  EXPECT_NO_THROW(tau_range(0.3));
  EXPECT_THROW(tau_range(1.5), ConfigError);
  EXPECT_THROW(tau_range(1.0), ConfigError);
  EXPECT_THROW(tau_range(0.0), ConfigError);
}

TEST(Verify, BoundConstant) {
  EXPECT_NEAR(bound_constant(1.0), std::log(1.0 + std::exp(2.0) / 2.0), 1e-15);
  EXPECT_NEAR(bound_constant(0.05), 20.0 * bound_constant(1.0), 1e-12);
}

TEST(Verify, BoundHoldsTriviallyWhenTopKArePositives) {
  BoundInstance in;
  for (int i = 0; i < 30; ++i) in.scores.push_back(1.0 - i / 15.0);
  for (Index i = 0; i < 10; ++i) in.positives.push_back(i);
  in.tau = 0.045;
  in.beta = quantile::exact_quantile(in.scores, 10);
  const auto ev = evaluate_bound(in, 10, 1e-6);
  EXPECT_EQ(ev.neg_log_precision, 0.0);
  EXPECT_GE(ev.talos, 0.0);
  EXPECT_GE(ev.slack(), 0.0);
}

TEST(Verify, ZeroPrecisionUsesEpsilonConvention) {
  BoundInstance in;
  for (int i = 0; i < 20; ++i) in.scores.push_back(1.0 - i / 10.0);
  in.positives = {19};
  in.tau = 0.045;
  in.beta = quantile::exact_quantile(in.scores, 5);
  EXPECT_NEAR(evaluate_bound(in, 5, 1e-6).neg_log_precision, -std::log(1e-6), 1e-12);
}

TEST(Verify, BoundHasNoViolations) {
  const auto r = check_theorem1(BoundCheckConfig{});
  EXPECT_TRUE(r.passed) << r.detail.dump();
  EXPECT_EQ(r.detail["violations"], 0);
  EXPECT_GE(r.margin, 0.0);
}

TEST(Verify, DroIdentityAndGrid) {
  const auto r = check_dro_identity(DroCheckConfig{});
  EXPECT_TRUE(r.passed) << r.detail.dump();
  EXPECT_LE(r.detail["max_relative_error"].get<double>(), 1e-9);
  EXPECT_LE(r.detail["max_grid_gap"].get<double>(), 1e-3);
}

TEST(Verify, DroTwoNegativeGrid) {
  DroCheckConfig c;
  c.trials = 10;
  c.grid_negatives = 2;
  EXPECT_TRUE(check_dro_identity(c).passed);
}

TEST(Verify, DroEqualNegativesCollapse) {
  // Every Q in the ball has the same expectation, and the dual tends to it as tau grows.
  const std::vector<double> g(3, -0.7);
  EXPECT_NEAR(dro::grid_sup(g, 0.1), -0.7, 1e-12);
  EXPECT_NEAR(dro::minimize_dual(g, 0.1).second, -0.7, 1e-6);
  EXPECT_NEAR(dro::scaled_log_mean_exp(g, 0.3), -0.7, 1e-12);
}

TEST(Verify, DroSumMeanGapIsLogG) {
  LossSpec s;
  s.tau = 0.3;
  const std::vector<double> neg{0.2, -0.1, 0.5, 0.0};
  std::vector<double> g(4);
  const double sum_form = loss::evaluate_example(s, 0.4, neg, 0.1, g).value;
  std::vector<double> z;
  for (double x : neg) z.push_back(loss::log_sigmoid(x - 0.1) / 0.3);
  const double mean_form =
      -loss::log_sigmoid(0.3) / 0.3 + loss::log_sum_exp(z) - std::log(4.0);
  EXPECT_NEAR(sum_form - mean_form, std::log(4.0), 1e-14);
}

TEST(Verify, KlToUniform) {
  EXPECT_NEAR(dro::kl_to_uniform(std::vector<double>{0.5, 0.5}), 0.0, 1e-15);
  EXPECT_NEAR(dro::kl_to_uniform(std::vector<double>{1.0, 0.0}), std::log(2.0), 1e-15);
}

TEST(Verify, UnbiasednessCheck) {
  const auto r = measure_unbiasedness(UnbiasednessConfig{});
  EXPECT_LT(r.relative_error, 0.01);
  EXPECT_LE(r.z, 3.0);
  EXPECT_TRUE(check_unbiasedness(UnbiasednessConfig{}).passed);
}

TEST(Verify, AllChecksPassUnderTenSeeds) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    BoundCheckConfig b;
    b.seed = seed;
    DroCheckConfig d;
    d.seed = seed;
    d.trials = 200;
    d.grid_instances = 5;
    UnbiasednessConfig u;
    u.seed = seed;
    EXPECT_TRUE(check_theorem1(b).passed) << "seed " << seed;
    EXPECT_TRUE(check_dro_identity(d).passed) << "seed " << seed;
    EXPECT_TRUE(check_unbiasedness(u).passed) << "seed " << seed;
  }
}

// Mean slack L + C + log Precision@K across the admissible temperature range. Both C
// and the surrogate shrink as tau grows, so the measured slack is non-increasing in
// tau: smaller tau gives the larger margin on this instance family.
TEST(Verify, SlackTrendAcrossTauRange) {
  BoundCheckConfig c;
  c.trials = 300;
  const auto curve = bound_slack_by_tau(c, 9);
  ASSERT_EQ(curve.size(), 9u);
  for (std::size_t k = 1; k < curve.size(); ++k) {
    EXPECT_GT(curve[k].first, curve[k - 1].first);
    EXPECT_LE(curve[k].second, curve[k - 1].second);
    EXPECT_GT(curve[k].second, 0.0);
  }
}

TEST(Verify, ConfigValidation) {
  BoundCheckConfig b;
  b.K = 100;
  EXPECT_THROW(b.validate(), ConfigError);
  b = BoundCheckConfig{};
  b.epsilon_log = 2.0;
  EXPECT_THROW(b.validate(), ConfigError);
  DroCheckConfig d;
  d.grid_negatives = 4;
  EXPECT_THROW(d.validate(), ConfigError);
}
