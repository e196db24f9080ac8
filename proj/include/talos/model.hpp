#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "errors.hpp"
#include "random.hpp"

namespace talos {

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; a zero-norm operand scores 0.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// Matrix-factorization backbone: s_ui = cos(user_u, item_i) in [-1, 1].
struct FactorModel {
  Matrix users;
  Matrix items;
  std::uint64_t seed = 0;

  std::size_t num_users() const { return users.rows(); }
  std::size_t num_items() const { return items.rows(); }
  std::size_t dim() const { return users.cols(); }

  friend bool operator==(const FactorModel&, const FactorModel&) = default;
};

/// Entries drawn i.i.d. from normal(0, stddev) with a seeded generator.
inline FactorModel init_model(std::size_t num_users, std::size_t num_items, std::size_t dim,
                              std::uint64_t seed, double stddev = 0.1) {
  if (num_users == 0 || num_items == 0 || dim == 0)
    throw std::invalid_argument("init_model: counts and dim must be >= 1");
  FactorModel m{Matrix(num_users, dim), Matrix(num_items, dim), seed};
  Rng rng(derive_seed(seed, {0x1417ULL}));
  for (double& x : m.users.data()) x = rng.normal(0.0, stddev);
  for (double& x : m.items.data()) x = rng.normal(0.0, stddev);
  return m;
}

inline double score(const FactorModel& m, std::size_t user, std::size_t item) {
  if (user >= m.num_users() || item >= m.num_items())
    throw std::out_of_range("score: index out of range");
  return cosine(m.users.row(user), m.items.row(item));
}

template <typename Items>
std::vector<double> score_block(const FactorModel& m, std::size_t user, const Items& items) {
  std::vector<double> out;
  out.reserve(std::size(items));
  for (auto i : items) out.push_back(score(m, user, static_cast<std::size_t>(i)));
  return out;
}

/// Row-normalized copy of a matrix plus the original row norms; zero rows stay zero.
struct NormalizedRows {
  Matrix unit;
  std::vector<double> norms;

  explicit NormalizedRows(const Matrix& m) : unit(m.rows(), m.cols()), norms(m.rows()) {
    for (std::size_t r = 0; r < m.rows(); ++r) refresh(m, r);
  }

  void refresh(const Matrix& m, std::size_t r) {
    const auto src = m.row(r);
    const double n = norm(src);
    norms[r] = n;
    auto dst = unit.row(r);
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = n > 0.0 ? src[k] / n : 0.0;
  }
};

/// Gradient restricted to a set of touched rows. Rows are accumulated densely and
/// remembered in first-touch order so updates only visit what the batch touched.
class SparseRowGradient {
 public:
  SparseRowGradient() = default;
  SparseRowGradient(std::size_t rows, std::size_t cols)
      : values_(rows, cols), touched_(rows, false) {}

  std::span<double> row(std::size_t r) {
    if (!touched_[r]) {
      touched_[r] = true;
      order_.push_back(r);
    }
    return values_.row(r);
  }
  std::span<const double> row(std::size_t r) const { return values_.row(r); }

  const std::vector<std::size_t>& touched() const { return order_; }
  bool is_touched(std::size_t r) const { return touched_[r]; }

  double squared_norm() const {
    double s = 0.0;
    for (auto r : order_) s += dot(values_.row(r), values_.row(r));
    return s;
  }

  void clear() {
    for (auto r : order_) {
      for (double& x : values_.row(r)) x = 0.0;
      touched_[r] = false;
    }
    order_.clear();
  }

 private:
  Matrix values_;
  std::vector<bool> touched_;
  std::vector<std::size_t> order_;
};

struct ModelGradients {
  SparseRowGradient users;
  SparseRowGradient items;

  ModelGradients() = default;
  explicit ModelGradients(const FactorModel& m)
      : users(m.num_users(), m.dim()), items(m.num_items(), m.dim()) {}

  double squared_norm() const { return users.squared_norm() + items.squared_norm(); }
  void clear() {
    users.clear();
    items.clear();
  }
};

/// Adam moments for both embedding tables. Rows not in a sparse update keep their
/// moments untouched (lazy Adam); bias correction uses the global step.
struct AdamState {
  Matrix user_m, user_v, item_m, item_v;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(const FactorModel& m, double lr, double wd)
      : user_m(m.num_users(), m.dim()),
        user_v(m.num_users(), m.dim()),
        item_m(m.num_items(), m.dim()),
        item_v(m.num_items(), m.dim()),
        learning_rate(lr),
        weight_decay(wd) {}

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

namespace detail {

inline void adam_rows(const char* name, Matrix& param, Matrix& m1, Matrix& m2,
                      const SparseRowGradient& grad, const AdamState& s) {
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (auto r : grad.touched()) {
    const auto g = grad.row(r);
    auto p = param.row(r);
    auto a = m1.row(r);
    auto b = m2.row(r);
    for (std::size_t k = 0; k < g.size(); ++k) {
      a[k] = s.beta1 * a[k] + (1.0 - s.beta1) * g[k];
      b[k] = s.beta2 * b[k] + (1.0 - s.beta2) * g[k] * g[k];
      const double mhat = a[k] / c1;
      const double vhat = b[k] / c2;
      p[k] -= s.learning_rate * (mhat / (std::sqrt(vhat) + s.eps) + s.weight_decay * p[k]);
    }
    for (double x : p)
      if (!std::isfinite(x))
        throw NumericalError(std::string("non-finite parameter in ") + name + " row " +
                             std::to_string(r));
  }
}

inline void check_finite(const char* name, const SparseRowGradient& grad) {
  for (auto r : grad.touched())
    for (double x : grad.row(r))
      if (!std::isfinite(x))
        throw NumericalError(std::string("non-finite gradient in ") + name + " row " +
                             std::to_string(r));
}

}  // namespace detail

/// One Adam step (decoupled weight decay) on the rows present in `grads`.
inline void apply_gradients(FactorModel& model, AdamState& state, const ModelGradients& grads) {
  detail::check_finite("user_embeddings", grads.users);
  detail::check_finite("item_embeddings", grads.items);
  ++state.step;
  detail::adam_rows("user_embeddings", model.users, state.user_m, state.user_v, grads.users,
                    state);
  detail::adam_rows("item_embeddings", model.items, state.item_m, state.item_v, grads.items,
                    state);
}

/// Chain rule through cosine scoring. Given dL/d(unit row) accumulated in `unit_grad`,
/// writes dL/d(raw row) = (g - (g·u)u)/|x| into the same span.
inline void project_unit_gradient(std::span<double> unit_grad, std::span<const double> unit,
                                  double raw_norm) {
  if (raw_norm == 0.0) {
    for (double& x : unit_grad) x = 0.0;
    return;
  }
  const double gu = dot(unit_grad, unit);
  for (std::size_t k = 0; k < unit_grad.size(); ++k)
    unit_grad[k] = (unit_grad[k] - gu * unit[k]) / raw_norm;
}

}  // namespace talos
