#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "losses.hpp"
#include "simulator.hpp"
#include "trainer.hpp"
#include "verify.hpp"

namespace talos {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Every accepted key with its default.
inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys{
      {"seed", "2024", "seed for splitting, initialization, sampling and simulation"},
      {"workers", "1", "worker threads; results do not depend on this"},
      // dataset
      {"split_mode", "iid", "iid | temporal"},
      {"train_fraction", "0.8", "share of each user's positives kept out of test"},
      {"validation_fraction", "0.1", "share of the training pool moved to validation"},
      {"min_rating", "3", "drop ratings below this; `none` keeps everything"},
      {"core", "5", "k-core threshold for users and items"},
      // loss
      {"loss", "talos",
       "talos | softmax | bpr | talos_wo_quantile | talos_wo_outside | talos_wo_denominator"},
      {"tau", "0.1", "temperature"},
      {"K", "20", "Top-K cutoff the threshold tracks"},
      {"num_negatives", "1024", "sampled negatives per positive"},
      {"epsilon_log", "1e-6", "log(0) := log(epsilon) for the bound check"},
      // training
      {"epochs", "300", "maximum epochs"},
      {"batch_size", "1024", "positive pairs per batch"},
      {"lr", "1e-3", "Adam learning rate; tuning grid {1e-1, 1e-2, 1e-3}"},
      {"weight_decay", "0", "decoupled weight decay"},
      {"dim", "64", "embedding dimension"},
      {"init_stddev", "0.1", "stddev of the normal initializer"},
      {"quantile_lr", "1e-3", "learning rate for the thresholds"},
      {"quantile_optimizer", "sgd", "sgd | adam for the thresholds"},
      {"beta_init", "0", "initial threshold, or `quantile` for the K-th score of the initial model"},
      {"eval_cutoffs", "20", "comma-separated cutoffs"},
      {"patience", "25", "epochs without validation improvement before stopping"},
      {"eval_metric", "precision@20", "validation metric for early stopping"},
      // simulator
      {"sim_trials", "10000", "ranking-list pairs"},
      {"sim_total_items", "2000", "items per simulated list"},
      {"sim_min_positives", "5", "smallest positive count"},
      {"sim_max_positives", "50", "largest positive count"},
      {"sim_K", "20", "Top-K cutoff"},
      {"sim_alpha", "0.3", "LLPAUC positive fraction"},
      {"sim_beta", "0.1", "LLPAUC negative fraction"},
      {"sim_shared_positive_count", "true", "both lists of a trial share one positive count"},
      // verification
      {"bound_trials", "1000", "random instances for the Precision@K bound"},
      {"bound_items", "100", "items per bound instance"},
      {"bound_K", "10", "cutoff for the bound"},
      {"dro_trials", "1000", "random instances for the DRO identity"},
      {"dro_eta", "0.1", "KL radius for the grid supremum"},
      {"dro_grid_instances", "20", "instances for the grid supremum"},
      {"dro_grid_negatives", "3", "negatives per grid instance (2 or 3)"},
      {"unbiased_items", "500", "|I| for the unbiasedness check"},
      {"unbiased_positives", "20", "|P_u|"},
      {"unbiased_K", "20", "K"},
      {"unbiased_sample", "32", "|G_u|"},
      {"unbiased_draws", "10000", "Monte-Carlo draws"},
  };
  return keys;
}

/// Flat key=value configuration. Later sources override earlier ones.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_[k.name] = k.default_value;
  }

  static bool known(std::string_view key) {
    for (const auto& k : config_schema())
      if (k.name == key) return true;
    return false;
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key: " + key);
    values_[key] = value;
  }

  /// Parses `key = value` lines; `#` starts a comment.
  void merge_stream(std::istream& in, const std::string& origin = "config") {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      const auto t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      const auto key = trim(t.substr(0, eq));
      if (!known(key))
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown config key: " + key);
      values_[key] = trim(t.substr(eq + 1));
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    merge_stream(in, path.string());
  }

  /// `key=value` override from the command line.
  void merge_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got `" + kv + "`");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
      throw ConfigError("config key " + key + " expects a number, got `" + s + "`");
    return v;
  }

  std::uint64_t count(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError("config key " + key + " expects a non-negative integer, got `" + s + "`");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key " + key + " expects true/false, got `" + s + "`");
  }

  std::vector<std::size_t> counts(const std::string& key) const {
    std::vector<std::size_t> out;
    std::stringstream ss(str(key));
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = trim(part);
      std::size_t v = 0;
      auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
      if (part.empty() || ec != std::errc() || p != part.data() + part.size())
        throw ConfigError("config key " + key + " expects a comma-separated integer list");
      out.push_back(v);
    }
    return out;
  }

  SplitConfig split_config() const {
    SplitConfig c;
    const auto& mode = str("split_mode");
    if (mode == "iid") c.mode = SplitMode::iid;
    else if (mode == "temporal") c.mode = SplitMode::temporal;
    else throw ConfigError("split_mode must be iid or temporal");
    c.train_fraction = real("train_fraction");
    c.validation_fraction_of_train = real("validation_fraction");
    if (str("min_rating") == "none") c.min_rating.reset();
    else c.min_rating = real("min_rating");
    c.core = static_cast<int>(count("core"));
    c.seed = count("seed");
    c.validate();
    return c;
  }

  LossSpec loss_spec() const {
    LossSpec s;
    const auto f = parse_loss_family(str("loss"));
    if (!f) throw ConfigError("unknown loss family: " + str("loss"));
    s.family = *f;
    s.tau = real("tau");
    s.K = static_cast<int>(count("K"));
    s.num_negatives = count("num_negatives");
    s.epsilon_log = real("epsilon_log");
    s.validate();
    return s;
  }

  TrainConfig train_config() const {
    TrainConfig c;
    c.loss = loss_spec();
    c.epochs = count("epochs");
    c.batch_size = count("batch_size");
    c.lr = real("lr");
    c.weight_decay = real("weight_decay");
    c.dim = count("dim");
    c.init_stddev = real("init_stddev");
    c.quantile_lr = real("quantile_lr");
    if (str("beta_init") == "quantile") c.beta_init_from_scores = true;
    else c.beta_init = real("beta_init");
    try {
      c.quantile_optimizer = parse_threshold_optimizer(str("quantile_optimizer"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    c.eval_cutoffs = counts("eval_cutoffs");
    c.patience = count("patience");
    c.eval_metric = str("eval_metric");
    c.seed = count("seed");
    c.workers = count("workers");
    c.validate();
    bool metric_ok = false;
    for (auto k : c.eval_cutoffs)
      for (const auto& n : cutoff_metric_names()) metric_ok |= c.eval_metric == metric_key(n, k);
    if (!metric_ok)
      throw ConfigError("eval_metric " + c.eval_metric + " is not computed for eval_cutoffs");
    return c;
  }

  SimulationConfig simulation_config() const {
    SimulationConfig c;
    c.trials = count("sim_trials");
    c.total_items = count("sim_total_items");
    c.min_positives = count("sim_min_positives");
    c.max_positives = count("sim_max_positives");
    c.K = count("sim_K");
    c.llpauc_alpha = real("sim_alpha");
    c.llpauc_beta = real("sim_beta");
    c.shared_positive_count = flag("sim_shared_positive_count");
    c.seed = count("seed");
    c.workers = count("workers");
    c.validate();
    return c;
  }

  BoundCheckConfig bound_config() const {
    BoundCheckConfig c;
    c.epsilon_log = real("epsilon_log");
    c.trials = count("bound_trials");
    c.num_items = count("bound_items");
    c.K = count("bound_K");
    c.max_positives = std::min<std::size_t>(2 * c.K, c.num_items);
    c.seed = count("seed");
    c.validate();
    return c;
  }

  DroCheckConfig dro_config() const {
    DroCheckConfig c;
    c.trials = count("dro_trials");
    c.eta = real("dro_eta");
    c.grid_instances = count("dro_grid_instances");
    c.grid_negatives = count("dro_grid_negatives");
    c.seed = count("seed");
    c.validate();
    return c;
  }

  UnbiasednessConfig unbiasedness_config() const {
    UnbiasednessConfig c;
    c.num_items = count("unbiased_items");
    c.num_positives = count("unbiased_positives");
    c.K = count("unbiased_K");
    c.sample_size = count("unbiased_sample");
    c.draws = count("unbiased_draws");
    c.seed = count("seed");
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    return c;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  std::map<std::string, std::string> values_;
};

}  // namespace talos
