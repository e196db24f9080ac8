#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "random.hpp"

namespace talos {

using Index = std::uint32_t;

struct RawInteraction {
  std::string user;
  std::string item;
  std::optional<double> rating;
  std::optional<std::int64_t> timestamp;
};

enum class SplitMode { iid, temporal };

inline std::string_view to_string(SplitMode m) { return m == SplitMode::iid ? "iid" : "temporal"; }

struct SplitConfig {
  SplitMode mode = SplitMode::iid;
  double train_fraction = 0.8;
  double validation_fraction_of_train = 0.1;
  std::optional<double> min_rating = 3.0;
  int core = 5;
  std::uint64_t seed = 2024;

  void validate() const {
    auto in_open_unit = [](double x) { return x > 0.0 && x < 1.0; };
    if (!in_open_unit(train_fraction)) throw ConfigError("train_fraction must lie in (0,1)");
    if (!in_open_unit(validation_fraction_of_train))
      throw ConfigError("validation_fraction must lie in (0,1)");
    if (core < 0) throw ConfigError("core must be >= 0");
    if (min_rating && !std::isfinite(*min_rating)) throw ConfigError("min_rating must be finite");
  }
};

enum class Split { train = 0, validation = 1, test = 2 };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

struct Interaction {
  Index user = 0;
  Index item = 0;
  std::optional<std::int64_t> timestamp;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct DatasetMetadata {
  std::string mode = "none";
  std::uint64_t seed = 0;
  std::size_t raw_lines = 0;
  std::size_t below_min_rating = 0;
  std::size_t duplicates = 0;
  std::size_t removed_by_core = 0;
  std::size_t dropped_single_positive_users = 0;
  std::size_t dropped_empty_train_users = 0;

  friend bool operator==(const DatasetMetadata&, const DatasetMetadata&) = default;
};

/// Immutable interaction store: dense user/item index spaces, the filtered
/// interaction pool, and per-user sorted positive lists for each split.
class InteractionDataset {
 public:
  InteractionDataset() = default;

  std::size_t num_users() const { return user_ids_.size(); }
  std::size_t num_items() const { return item_ids_.size(); }
  const std::string& user_id(Index u) const { return user_ids_.at(u); }
  const std::string& item_id(Index i) const { return item_ids_.at(i); }

  std::optional<Index> find_user(const std::string& id) const { return find(user_ids_, id); }
  std::optional<Index> find_item(const std::string& id) const { return find(item_ids_, id); }

  const std::vector<Interaction>& interactions() const { return interactions_; }
  const DatasetMetadata& metadata() const { return meta_; }
  bool has_split() const { return meta_.mode != "none"; }

  std::span<const Index> positives(Split s, Index user) const {
    const auto& lists = splits_[static_cast<int>(s)];
    if (lists.empty()) return {};
    return lists.at(user);
  }

  bool is_positive(Split s, Index user, Index item) const {
    auto p = positives(s, user);
    return std::binary_search(p.begin(), p.end(), item);
  }

  std::size_t count(Split s) const {
    std::size_t n = 0;
    for (const auto& l : splits_[static_cast<int>(s)]) n += l.size();
    return n;
  }

  /// Every (user, item) training pair in user-major order.
  std::vector<std::pair<Index, Index>> train_pairs() const {
    std::vector<std::pair<Index, Index>> out;
    out.reserve(count(Split::train));
    for (Index u = 0; u < num_users(); ++u)
      for (Index i : positives(Split::train, u)) out.emplace_back(u, i);
    return out;
  }

  /// Builds a dataset directly from dense interactions; ids are the zero-padded decimal indices.
  /// Used for synthetic instances and tests.
  static InteractionDataset from_dense(std::size_t num_users, std::size_t num_items,
                                       std::vector<Interaction> interactions) {
    InteractionDataset d;
    auto padded = [](std::size_t v, std::size_t n) {
      auto s = std::to_string(v);
      const auto width = std::to_string(n > 0 ? n - 1 : 0).size();
      return std::string(width - s.size(), '0') + s;
    };
    for (std::size_t u = 0; u < num_users; ++u) d.user_ids_.push_back(padded(u, num_users));
    for (std::size_t i = 0; i < num_items; ++i) d.item_ids_.push_back(padded(i, num_items));
    for (const auto& x : interactions)
      if (x.user >= num_users || x.item >= num_items)
        throw std::invalid_argument("interaction index out of range");
    d.interactions_ = std::move(interactions);
    d.canonicalize();
    return d;
  }

  /// Dataset whose train split holds every interaction (no validation/test).
  static InteractionDataset all_train(std::size_t num_users, std::size_t num_items,
                                      std::vector<Interaction> interactions) {
    auto d = from_dense(num_users, num_items, std::move(interactions));
    d.meta_.mode = "all-train";
    d.init_splits();
    for (const auto& x : d.interactions_) d.splits_[0][x.user].push_back(x.item);
    d.sort_splits();
    return d;
  }

  friend InteractionDataset load(const std::filesystem::path&, const SplitConfig&);
  friend InteractionDataset load_from_stream(std::istream&, const SplitConfig&);
  friend InteractionDataset split_iid(const InteractionDataset&, const SplitConfig&);
  friend InteractionDataset split_temporal(const InteractionDataset&, const SplitConfig&);
  friend void serialize(const InteractionDataset&, std::ostream&);
  friend InteractionDataset deserialize_dataset(std::istream&);

  friend bool operator==(const InteractionDataset&, const InteractionDataset&) = default;

 private:
  static std::optional<Index> find(const std::vector<std::string>& ids, const std::string& id) {
    auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) return std::nullopt;
    return static_cast<Index>(it - ids.begin());
  }

  void canonicalize() {
    std::sort(interactions_.begin(), interactions_.end(), [](const auto& a, const auto& b) {
      return std::tie(a.user, a.item) < std::tie(b.user, b.item);
    });
  }

  void init_splits() {
    for (auto& s : splits_) s.assign(num_users(), {});
  }

  void sort_splits() {
    for (auto& s : splits_)
      for (auto& l : s) std::sort(l.begin(), l.end());
  }

  std::vector<std::string> user_ids_;
  std::vector<std::string> item_ids_;
  std::vector<Interaction> interactions_;
  std::vector<std::vector<Index>> splits_[3];
  DatasetMetadata meta_;
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

inline RawInteraction parse_line(std::string_view line, std::size_t lineno) {
  auto f = split_fields(line);
  if (f.size() < 2 || f.size() > 4)
    throw FormatError("expected 2-4 fields `user item [rating] [timestamp]`, got " +
                          std::to_string(f.size()),
                      lineno);
  RawInteraction r{std::string(f[0]), std::string(f[1]), std::nullopt, std::nullopt};
  if (f.size() >= 3) {
    double v = 0;
    if (!parse_number(f[2], v) || !std::isfinite(v))
      throw FormatError("rating is not a finite number: " + std::string(f[2]), lineno);
    r.rating = v;
  }
  if (f.size() == 4) {
    std::int64_t t = 0;
    if (!parse_number(f[3], t) || t < 0)
      throw FormatError("timestamp is not a non-negative integer: " + std::string(f[3]), lineno);
    r.timestamp = t;
  }
  return r;
}

inline std::size_t floor_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

}  // namespace detail

/// Parses, filters (rating threshold, iterative k-core) and indexes interactions.
/// The result has no split yet; see split_iid / split_temporal.
inline InteractionDataset load_from_stream(std::istream& in, const SplitConfig& config) {
  config.validate();
  InteractionDataset d;
  struct Row {
    std::string user, item;
    std::optional<std::int64_t> ts;
  };
  std::vector<Row> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view v(line);
    auto first = v.find_first_not_of(" \t\r");
    if (first == std::string_view::npos || v[first] == '#') continue;
    auto r = detail::parse_line(v, lineno);
    ++d.meta_.raw_lines;
    if (config.min_rating && r.rating && *r.rating < *config.min_rating) {
      ++d.meta_.below_min_rating;
      continue;
    }
    rows.push_back({std::move(r.user), std::move(r.item), r.timestamp});
  }

  // Deduplicate (user, item), keeping the earliest timestamp.
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.user != b.user) return a.user < b.user;
    if (a.item != b.item) return a.item < b.item;
    return a.ts.value_or(INT64_MAX) < b.ts.value_or(INT64_MAX);
  });
  auto last = std::unique(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.user == b.user && a.item == b.item;
  });
  d.meta_.duplicates = static_cast<std::size_t>(rows.end() - last);
  rows.erase(last, rows.end());

  // Iterative k-core until fixpoint.
  if (config.core > 0) {
    const auto core = static_cast<std::size_t>(config.core);
    bool changed = true;
    while (changed) {
      std::unordered_map<std::string_view, std::size_t> udeg, ideg;
      for (const auto& r : rows) {
        ++udeg[r.user];
        ++ideg[r.item];
      }
      std::vector<char> keep(rows.size());
      for (std::size_t k = 0; k < rows.size(); ++k)
        keep[k] = udeg[rows[k].user] >= core && ideg[rows[k].item] >= core;
      udeg.clear();
      ideg.clear();
      std::vector<Row> kept;
      kept.reserve(rows.size());
      for (std::size_t k = 0; k < rows.size(); ++k)
        if (keep[k]) kept.push_back(std::move(rows[k]));
      changed = kept.size() != rows.size();
      d.meta_.removed_by_core += rows.size() - kept.size();
      rows = std::move(kept);
    }
  }
  if (rows.empty()) throw EmptyDatasetError("no interactions left after filtering");

  for (const auto& r : rows) {
    d.user_ids_.push_back(r.user);
    d.item_ids_.push_back(r.item);
  }
  for (auto* ids : {&d.user_ids_, &d.item_ids_}) {
    std::sort(ids->begin(), ids->end());
    ids->erase(std::unique(ids->begin(), ids->end()), ids->end());
  }
  d.interactions_.reserve(rows.size());
  for (const auto& r : rows)
    d.interactions_.push_back({*d.find_user(r.user), *d.find_item(r.item), r.ts});
  d.canonicalize();
  return d;
}

inline InteractionDataset load(const std::filesystem::path& path, const SplitConfig& config) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return load_from_stream(in, config);
}

/// Per-user random split: floor((1-train_fraction)·n) positives to test, then
/// floor(validation_fraction·pool) of the remainder to validation, the rest to train.
/// Users with fewer than two positives are dropped and counted in the metadata.
inline InteractionDataset split_iid(const InteractionDataset& source, const SplitConfig& config) {
  config.validate();
  std::vector<std::vector<Index>> per_user(source.num_users());
  for (const auto& x : source.interactions()) per_user[x.user].push_back(x.item);

  InteractionDataset d;
  d.item_ids_ = source.item_ids_;
  d.meta_ = source.meta_;
  d.meta_.mode = "iid";
  d.meta_.seed = config.seed;
  d.meta_.dropped_single_positive_users = 0;
  d.meta_.dropped_empty_train_users = 0;

  struct Parts {
    std::vector<Index> train, validation, test;
  };
  std::vector<std::pair<Index, Parts>> kept;
  for (Index u = 0; u < source.num_users(); ++u) {
    auto items = per_user[u];
    if (items.size() < 2) {
      if (!items.empty()) ++d.meta_.dropped_single_positive_users;
      continue;
    }
    Rng rng(derive_seed(config.seed, {0x5e1fULL, u}));
    rng.shuffle(std::span<Index>(items));
    const std::size_t n = items.size();
    const std::size_t n_test = detail::floor_count(1.0 - config.train_fraction, n);
    const std::size_t pool = n - n_test;
    const std::size_t n_val = detail::floor_count(config.validation_fraction_of_train, pool);
    Parts p;
    p.test.assign(items.begin(), items.begin() + n_test);
    p.validation.assign(items.begin() + n_test, items.begin() + n_test + n_val);
    p.train.assign(items.begin() + n_test + n_val, items.end());
    if (p.train.empty()) {
      ++d.meta_.dropped_empty_train_users;
      continue;
    }
    kept.emplace_back(u, std::move(p));
  }
  if (kept.empty()) throw EmptyDatasetError("no users left after IID split");

  std::vector<std::optional<Index>> remap(source.num_users());
  for (Index k = 0; k < kept.size(); ++k) {
    remap[kept[k].first] = k;
    d.user_ids_.push_back(source.user_ids_[kept[k].first]);
  }
  for (const auto& x : source.interactions())
    if (remap[x.user]) d.interactions_.push_back({*remap[x.user], x.item, x.timestamp});
  d.canonicalize();
  d.init_splits();
  for (Index k = 0; k < kept.size(); ++k) {
    d.splits_[0][k] = std::move(kept[k].second.train);
    d.splits_[1][k] = std::move(kept[k].second.validation);
    d.splits_[2][k] = std::move(kept[k].second.test);
  }
  d.sort_splits();
  return d;
}

/// Global chronological split: the earliest interactions form the training pool,
/// the latest floor((1-train_fraction)·n) form the test set; a seeded random
/// floor(validation_fraction·pool) of the pool becomes validation.
/// Timestamp ties are ordered by (user index, item index).
inline InteractionDataset split_temporal(const InteractionDataset& source,
                                         const SplitConfig& config) {
  config.validate();
  const auto& xs = source.interactions();
  const auto missing = static_cast<std::size_t>(
      std::count_if(xs.begin(), xs.end(), [](const auto& x) { return !x.timestamp; }));
  if (missing > 0)
    throw FormatError("temporal split needs timestamps; " + std::to_string(missing) +
                          " interactions have none",
                      0);

  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::tuple(*xs[a].timestamp, xs[a].user, xs[a].item) <
           std::tuple(*xs[b].timestamp, xs[b].user, xs[b].item);
  });
  const std::size_t n = xs.size();
  const std::size_t n_test = detail::floor_count(1.0 - config.train_fraction, n);
  const std::size_t pool = n - n_test;
  const std::size_t n_val = detail::floor_count(config.validation_fraction_of_train, pool);

  std::vector<std::size_t> pool_positions(pool);
  std::iota(pool_positions.begin(), pool_positions.end(), std::size_t{0});
  Rng rng(derive_seed(config.seed, {0x7e4dULL}));
  rng.shuffle(std::span<std::size_t>(pool_positions));
  std::vector<bool> is_val(pool, false);
  for (std::size_t k = 0; k < n_val; ++k) is_val[pool_positions[k]] = true;

  InteractionDataset d = source;
  d.meta_.mode = "temporal";
  d.meta_.seed = config.seed;
  d.init_splits();
  for (std::size_t r = 0; r < n; ++r) {
    const auto& x = xs[order[r]];
    const int s = r >= pool ? 2 : (is_val[r] ? 1 : 0);
    d.splits_[s][x.user].push_back(x.item);
  }
  d.sort_splits();
  return d;
}

inline InteractionDataset split(const InteractionDataset& source, const SplitConfig& config) {
  return config.mode == SplitMode::iid ? split_iid(source, config)
                                       : split_temporal(source, config);
}

// Line-delimited split artifact. The first line carries the format version.
inline constexpr std::string_view kSplitMagic = "talos-split";
inline constexpr int kSplitVersion = 1;

inline void serialize(const InteractionDataset& d, std::ostream& out) {
  out << kSplitMagic << ' ' << kSplitVersion << '\n';
  const auto& m = d.meta_;
  out << "mode " << m.mode << '\n' << "seed " << m.seed << '\n';
  out << "meta raw_lines " << m.raw_lines << '\n'
      << "meta below_min_rating " << m.below_min_rating << '\n'
      << "meta duplicates " << m.duplicates << '\n'
      << "meta removed_by_core " << m.removed_by_core << '\n'
      << "meta dropped_single_positive_users " << m.dropped_single_positive_users << '\n'
      << "meta dropped_empty_train_users " << m.dropped_empty_train_users << '\n';
  out << "users " << d.user_ids_.size() << '\n';
  for (const auto& id : d.user_ids_) out << id << '\n';
  out << "items " << d.item_ids_.size() << '\n';
  for (const auto& id : d.item_ids_) out << id << '\n';
  out << "interactions " << d.interactions_.size() << '\n';
  for (const auto& x : d.interactions_) {
    out << x.user << ' ' << x.item << ' ';
    if (x.timestamp) out << *x.timestamp; else out << '-';
    out << '\n';
  }
  for (int s = 0; s < 3; ++s) {
    std::size_t nonempty = 0;
    for (const auto& l : d.splits_[s]) nonempty += !l.empty();
    out << "split " << to_string(static_cast<Split>(s)) << ' ' << nonempty << '\n';
    for (std::size_t u = 0; u < d.splits_[s].size(); ++u) {
      if (d.splits_[s][u].empty()) continue;
      out << u;
      for (Index i : d.splits_[s][u]) out << ' ' << i;
      out << '\n';
    }
  }
  out << "end\n";
}

inline InteractionDataset deserialize_dataset(std::istream& in) {
  std::size_t lineno = 0;
  std::string line;
  auto next = [&]() -> std::string& {
    if (!std::getline(in, line)) throw FormatError("unexpected end of split file", lineno);
    ++lineno;
    return line;
  };
  auto expect = [&](std::string_view key) {
    auto f = detail::split_fields(next());
    if (f.size() < 2 || f[0] != key)
      throw FormatError("expected `" + std::string(key) + "`", lineno);
    return f;
  };
  auto to_size = [&](std::string_view s) {
    std::size_t v = 0;
    if (!detail::parse_number(s, v)) throw FormatError("bad count: " + std::string(s), lineno);
    return v;
  };

  auto header = expect(kSplitMagic);
  if (header[1] != std::to_string(kSplitVersion))
    throw FormatError("unsupported split format version " + std::string(header[1]), lineno);

  InteractionDataset d;
  d.meta_.mode = std::string(expect("mode")[1]);
  d.meta_.seed = to_size(expect("seed")[1]);
  std::map<std::string, std::size_t*> meta_fields{
      {"raw_lines", &d.meta_.raw_lines},
      {"below_min_rating", &d.meta_.below_min_rating},
      {"duplicates", &d.meta_.duplicates},
      {"removed_by_core", &d.meta_.removed_by_core},
      {"dropped_single_positive_users", &d.meta_.dropped_single_positive_users},
      {"dropped_empty_train_users", &d.meta_.dropped_empty_train_users}};
  for (std::size_t k = 0; k < meta_fields.size(); ++k) {
    auto f = expect("meta");
    auto it = meta_fields.find(std::string(f.at(1)));
    if (f.size() != 3 || it == meta_fields.end()) throw FormatError("bad meta line", lineno);
    *it->second = to_size(f[2]);
  }
  for (auto [key, ids] : {std::pair{"users", &d.user_ids_}, std::pair{"items", &d.item_ids_}}) {
    const auto n = to_size(expect(key)[1]);
    ids->reserve(n);
    for (std::size_t k = 0; k < n; ++k) ids->push_back(next());
    if (!std::is_sorted(ids->begin(), ids->end()))
      throw FormatError(std::string(key) + " ids are not sorted", lineno);
  }
  const auto n_inter = to_size(expect("interactions")[1]);
  d.interactions_.reserve(n_inter);
  for (std::size_t k = 0; k < n_inter; ++k) {
    auto f = detail::split_fields(next());
    if (f.size() != 3) throw FormatError("bad interaction line", lineno);
    Interaction x;
    std::uint64_t u = 0, i = 0;
    if (!detail::parse_number(f[0], u) || !detail::parse_number(f[1], i) ||
        u >= d.user_ids_.size() || i >= d.item_ids_.size())
      throw FormatError("bad interaction indices", lineno);
    x.user = static_cast<Index>(u);
    x.item = static_cast<Index>(i);
    if (f[2] != "-") {
      std::int64_t t = 0;
      if (!detail::parse_number(f[2], t)) throw FormatError("bad timestamp", lineno);
      x.timestamp = t;
    }
    d.interactions_.push_back(x);
  }
  if (d.meta_.mode != "none") d.init_splits();
  for (int s = 0; s < 3; ++s) {
    auto f = expect("split");
    if (f.size() != 3 || f[1] != to_string(static_cast<Split>(s)))
      throw FormatError("expected split " + std::string(to_string(static_cast<Split>(s))), lineno);
    const auto rows = to_size(f[2]);
    for (std::size_t k = 0; k < rows; ++k) {
      auto g = detail::split_fields(next());
      std::uint64_t u = 0;
      if (g.empty() || !detail::parse_number(g[0], u) || u >= d.num_users())
        throw FormatError("bad user index in split", lineno);
      auto& list = d.splits_[s].at(u);
      for (std::size_t j = 1; j < g.size(); ++j) {
        std::uint64_t i = 0;
        if (!detail::parse_number(g[j], i) || i >= d.num_items())
          throw FormatError("bad item index in split", lineno);
        list.push_back(static_cast<Index>(i));
      }
      if (!std::is_sorted(list.begin(), list.end()))
        throw FormatError("split list is not sorted", lineno);
    }
  }
  if (next() != "end") throw FormatError("missing end marker", lineno);
  return d;
}

inline void save_dataset(const InteractionDataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  serialize(d, out);
}

inline InteractionDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return deserialize_dataset(in);
}

}  // namespace talos
