#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "json.hpp"
#include "metrics.hpp"
#include "quantile.hpp"
#include "simulator.hpp"
#include "trainer.hpp"
#include "verify.hpp"

namespace talos {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kDataDirEnv = "TALOS_DATA_DIR";

namespace cli_detail {

namespace fs = std::filesystem;

/// Relative inputs that do not exist are looked up under $TALOS_DATA_DIR.
inline fs::path resolve_input(const std::string& given, const char* what) {
  fs::path p(given);
  if (fs::exists(p)) return p;
  if (const char* dir = std::getenv(kDataDirEnv); dir && p.is_relative()) {
    const auto alt = fs::path(dir) / p;
    if (fs::exists(alt)) return alt;
  }
  throw ConfigError(std::string(what) + " not found: " + given);
}

inline fs::path default_ratings_path() {
  if (const char* dir = std::getenv(kDataDirEnv)) return fs::path(dir) / "ml-100k" / "u.data";
  return fs::path("data") / "ml-100k" / "u.data";
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;

  RunConfig load() const {
    RunConfig c;
    if (!config_path.empty()) c.merge_file(config_path);
    for (const auto& kv : overrides) c.merge_assignment(kv);
    return c;
  }
};

inline void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "key = value config file");
  app->add_option("-s,--set", c.overrides, "override a config key (key=value); repeatable");
}

inline nlohmann::ordered_json dataset_summary(const InteractionDataset& d) {
  const auto& m = d.metadata();
  nlohmann::ordered_json j;
  j["mode"] = m.mode;
  j["users"] = d.num_users();
  j["items"] = d.num_items();
  j["interactions"] = d.interactions().size();
  j["train"] = d.count(Split::train);
  j["validation"] = d.count(Split::validation);
  j["test"] = d.count(Split::test);
  j["raw_lines"] = m.raw_lines;
  j["below_min_rating"] = m.below_min_rating;
  j["duplicates"] = m.duplicates;
  j["removed_by_core"] = m.removed_by_core;
  j["dropped_single_positive_users"] = m.dropped_single_positive_users;
  j["dropped_empty_train_users"] = m.dropped_empty_train_users;
  return j;
}

inline void print_check_table(std::ostream& os, const std::vector<CheckResult>& checks) {
  os << std::left << std::setw(18) << "check" << std::setw(8) << "result"
     << "margin\n";
  for (const auto& c : checks)
    os << std::left << std::setw(18) << c.name << std::setw(8) << (c.passed ? "PASS" : "FAIL")
       << std::setprecision(6) << c.margin << '\n';
}

}  // namespace cli_detail

/// Entry point shared by the executable and the tests. Reports go to `out`,
/// diagnostics to `err`.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  using namespace cli_detail;

  CLI::App app{"Top-K recommendation training, evaluation and verification"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");
  {
    std::ostringstream keys;
    keys << "Config keys (default):\n";
    for (const auto& k : config_schema())
      keys << "  " << std::left << std::setw(26) << k.name << std::setw(14) << k.default_value << k.help
           << '\n';
    app.footer(keys.str());
  }

  // prepare
  Common prep_common;
  std::string prep_data, prep_out;
  auto* prep = app.add_subcommand("prepare", "filter and split a ratings file");
  add_common(prep, prep_common);
  prep->add_option("data", prep_data, "ratings file: user item [rating] [timestamp]");
  prep->add_option("-o,--out", prep_out, "split artifact to write")->required();

  // train
  Common train_common;
  std::string train_split, train_out;
  bool train_verbose = false;
  auto* tr = app.add_subcommand("train", "train a model on a prepared split");
  add_common(tr, train_common);
  tr->add_option("split", train_split, "split artifact")->required();
  tr->add_option("-o,--out-dir", train_out, "directory for log and checkpoint")->required();
  tr->add_flag("-v,--verbose", train_verbose, "per-epoch progress on stderr");

  // eval
  Common eval_common;
  std::string eval_ckpt, eval_split, eval_which = "test";
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, eval_common);
  ev->add_option("checkpoint", eval_ckpt, "checkpoint file")->required();
  ev->add_option("split", eval_split, "split artifact")->required();
  ev->add_option("--on", eval_which, "validation | test")
      ->check(CLI::IsMember({"validation", "test"}));

  // quantile-error
  Common qe_common;
  std::string qe_ckpt, qe_split;
  auto* qe = app.add_subcommand("quantile-error", "threshold error against exact quantiles");
  add_common(qe, qe_common);
  qe->add_option("checkpoint", qe_ckpt, "checkpoint file")->required();
  qe->add_option("split", qe_split, "split artifact")->required();

  // simulate
  Common sim_common;
  std::string sim_tsv;
  auto* sim = app.add_subcommand("simulate", "metric-inconsistency simulation");
  add_common(sim, sim_common);
  sim->add_option("--tsv", sim_tsv, "also write per-trial metrics as TSV");

  // verify
  Common ver_common;
  std::string ver_check = "all", ver_format = "json";
  auto* ver = app.add_subcommand("verify", "numerical checks of the bound, DRO identity and estimator");
  add_common(ver, ver_common);
  ver->add_option("--check", ver_check, "bound | dro | unbiasedness | all")
      ->check(CLI::IsMember({"bound", "dro", "unbiasedness", "all"}));
  ver->add_option("--format", ver_format, "json | table")->check(CLI::IsMember({"json", "table"}));

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*prep) {
      const auto cfg = prep_common.load();
      const auto split_cfg = cfg.split_config();
      const auto path = prep_data.empty() ? resolve_input(default_ratings_path().string(), "ratings file")
                                          : resolve_input(prep_data, "ratings file");
      const auto raw = load(path, split_cfg);
      const auto d = split(raw, split_cfg);
      save_dataset(d, prep_out);
      auto j = dataset_summary(d);
      j["source"] = path.string();
      j["out"] = prep_out;
      out << j.dump(2) << '\n';
      return kExitOk;
    }

    if (*tr) {
      const auto cfg = train_common.load();
      auto tc = cfg.train_config();
      tc.verbose = train_verbose;
      const auto d = load_dataset(resolve_input(train_split, "split file"));
      fs::create_directories(train_out);
      const auto result = train(d, tc);
      {
        std::ofstream log(fs::path(train_out) / "train_log.jsonl");
        result.log.write_json_lines(log, tc);
      }
      {
        std::ofstream resolved(fs::path(train_out) / "config.txt");
        for (const auto& [k, v] : cfg.values()) resolved << k << " = " << v << '\n';
      }
      const auto ckpt_path = fs::path(train_out) / "checkpoint.bin";
      save_checkpoint({result.model, result.adam, result.thresholds, result.log.best_epoch},
                      ckpt_path);
      MetricOptions mo;
      mo.cutoffs = tc.eval_cutoffs;
      auto test = evaluate(result.model, d, Split::test, mo, tc.workers);
      test.loss = std::string(to_string(tc.loss.family));
      test.tau = tc.loss.tau;
      test.seed = tc.seed;
      test.epoch = static_cast<long>(result.log.best_epoch);
      nlohmann::ordered_json j;
      j["epochs_run"] = result.log.epochs.size();
      j["best_epoch"] = result.log.best_epoch;
      j["best_validation"] = result.log.best_metric;
      j["stopped_early"] = result.log.stopped_early;
      j["test"] = test.to_json();
      j["checkpoint"] = ckpt_path.string();
      out << j.dump(2) << '\n';
      return kExitOk;
    }

    if (*ev) {
      const auto cfg = eval_common.load();
      const auto ck = load_checkpoint(resolve_input(eval_ckpt, "checkpoint"));
      const auto d = load_dataset(resolve_input(eval_split, "split file"));
      if (ck.model.num_users() != d.num_users() || ck.model.num_items() != d.num_items())
        throw ConfigError("checkpoint shape does not match the split");
      MetricOptions mo;
      mo.cutoffs = cfg.counts("eval_cutoffs");
      auto r = evaluate(ck.model, d, eval_which == "test" ? Split::test : Split::validation, mo,
                        cfg.count("workers"));
      r.seed = ck.model.seed;
      r.epoch = static_cast<long>(ck.epoch);
      r.loss = cfg.str("loss");
      r.tau = cfg.real("tau");
      out << r.to_json().dump(2) << '\n';
      return kExitOk;
    }

    if (*qe) {
      const auto cfg = qe_common.load();
      const auto ck = load_checkpoint(resolve_input(qe_ckpt, "checkpoint"));
      const auto d = load_dataset(resolve_input(qe_split, "split file"));
      if (ck.model.num_users() != d.num_users() || ck.model.num_items() != d.num_items())
        throw ConfigError("checkpoint shape does not match the split");
      const auto r = estimation_error_report(ck.model, ck.thresholds, d, ck.thresholds.K);
      nlohmann::ordered_json j{{"mean_abs_error", r.mean_abs_error},
                               {"max_abs_error", r.max_abs_error},
                               {"K", r.K},
                               {"num_users", r.num_users}};
      out << j.dump(2) << '\n';
      return kExitOk;
    }

    if (*sim) {
      const auto cfg = sim_common.load().simulation_config();
      const auto trials = simulate_trials(cfg);
      if (!sim_tsv.empty()) {
        std::ofstream tsv(sim_tsv);
        if (!tsv) throw ConfigError("cannot write " + sim_tsv);
        write_trials_tsv(tsv, trials);
      }
      out << count_inconsistencies(cfg, trials).to_json().dump(2) << '\n';
      return kExitOk;
    }

    if (*ver) {
      const auto cfg = ver_common.load();
      // Validate every selected configuration before running anything.
      const bool all = ver_check == "all";
      std::optional<BoundCheckConfig> bc;
      std::optional<DroCheckConfig> dc;
      std::optional<UnbiasednessConfig> uc;
      if (all || ver_check == "bound") bc = cfg.bound_config();
      if (all || ver_check == "dro") dc = cfg.dro_config();
      if (all || ver_check == "unbiasedness") uc = cfg.unbiasedness_config();
      std::vector<CheckResult> checks;
      if (bc) checks.push_back(check_theorem1(*bc));
      if (dc) checks.push_back(check_dro_identity(*dc));
      if (uc) checks.push_back(check_unbiasedness(*uc));
      bool ok = true;
      for (const auto& c : checks) ok &= c.passed;
      if (ver_format == "table") {
        print_check_table(out, checks);
      } else {
        print_check_table(err, checks);
        nlohmann::ordered_json j;
        j["all_passed"] = ok;
        auto arr = nlohmann::ordered_json::array();
        for (const auto& c : checks)
          arr.push_back({{"name", c.name}, {"passed", c.passed}, {"margin", c.margin},
                         {"detail", c.detail}});
        j["checks"] = arr;
        out << j.dump(2) << '\n';
      }
      return ok ? kExitOk : kExitFailure;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

inline int run_cli(int argc, char** argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int k = 1; k < argc; ++k) args.emplace_back(argv[k]);
  return run_cli(std::move(args), out, err);
}

}  // namespace talos
