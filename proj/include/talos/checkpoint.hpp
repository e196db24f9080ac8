#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "quantile.hpp"

namespace talos {

// Little-endian binary layout:
//   magic "TALOSCKP" | u32 version | u64 seed | u64 users | u64 items | u64 dim
//   f64 user[users*dim] | f64 item[items*dim]
//   u64 step | f64 lr, wd, beta1, beta2, eps | f64 m/v for users then items
//   i64 K | f64 quantile lr | f64 beta[users] | u8 optimizer
//   [adam: f64 m[users] | f64 v[users] | u64 steps[users]]
//   u64 epoch
inline constexpr char kCheckpointMagic[8] = {'T', 'A', 'L', 'O', 'S', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 2;

struct Checkpoint {
  FactorModel model;
  AdamState adam;
  ThresholdTable thresholds;
  std::uint64_t epoch = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}
  template <typename T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  template <typename T>
  void put(std::span<const T> v) {
    out_.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(T)));
  }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}
  template <typename T>
  T get() {
    T v{};
    read(&v, sizeof(T));
    return v;
  }
  template <typename T>
  void get(std::span<T> v) {
    read(v.data(), v.size() * sizeof(T));
  }

 private:
  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError("truncated checkpoint", 0);
  }
  std::istream& in_;
};

}  // namespace detail

inline void write_checkpoint(const Checkpoint& c, std::ostream& out) {
  detail::BinaryWriter w(out);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);
  const auto& m = c.model;
  w.put<std::uint64_t>(m.seed);
  w.put<std::uint64_t>(m.num_users());
  w.put<std::uint64_t>(m.num_items());
  w.put<std::uint64_t>(m.dim());
  w.put(m.users.data());
  w.put(m.items.data());
  const auto& a = c.adam;
  w.put<std::uint64_t>(a.step);
  for (double x : {a.learning_rate, a.weight_decay, a.beta1, a.beta2, a.eps}) w.put(x);
  for (const Matrix* mm : {&a.user_m, &a.user_v, &a.item_m, &a.item_v}) w.put(mm->data());
  w.put<std::int64_t>(c.thresholds.K);
  w.put(c.thresholds.learning_rate);
  w.put(std::span<const double>(c.thresholds.beta));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.thresholds.optimizer));
  if (c.thresholds.optimizer == ThresholdOptimizer::adam) {
    w.put(std::span<const double>(c.thresholds.m));
    w.put(std::span<const double>(c.thresholds.v));
    w.put(std::span<const std::uint64_t>(c.thresholds.steps));
  }
  w.put<std::uint64_t>(c.epoch);
  if (!out) throw std::runtime_error("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (in.gcount() != sizeof magic || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw FormatError("not a checkpoint file", 0);
  detail::BinaryReader r(in);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 0);
  Checkpoint c;
  c.model.seed = r.get<std::uint64_t>();
  const auto nu = r.get<std::uint64_t>();
  const auto ni = r.get<std::uint64_t>();
  const auto dim = r.get<std::uint64_t>();
  constexpr std::uint64_t kLimit = 1ULL << 32;
  if (nu == 0 || ni == 0 || dim == 0 || nu >= kLimit || ni >= kLimit || dim >= kLimit)
    throw FormatError("implausible checkpoint dimensions", 0);
  c.model.users = Matrix(nu, dim);
  c.model.items = Matrix(ni, dim);
  r.get(c.model.users.data());
  r.get(c.model.items.data());
  auto& a = c.adam;
  a.step = r.get<std::uint64_t>();
  for (double* x : {&a.learning_rate, &a.weight_decay, &a.beta1, &a.beta2, &a.eps})
    *x = r.get<double>();
  a.user_m = Matrix(nu, dim);
  a.user_v = Matrix(nu, dim);
  a.item_m = Matrix(ni, dim);
  a.item_v = Matrix(ni, dim);
  for (Matrix* mm : {&a.user_m, &a.user_v, &a.item_m, &a.item_v}) r.get(mm->data());
  c.thresholds.K = static_cast<int>(r.get<std::int64_t>());
  c.thresholds.learning_rate = r.get<double>();
  c.thresholds.beta.resize(nu);
  r.get(std::span<double>(c.thresholds.beta));
  const auto opt = r.get<std::uint8_t>();
  if (opt > 1) throw FormatError("unknown threshold optimizer tag", 0);
  c.thresholds.optimizer = static_cast<ThresholdOptimizer>(opt);
  if (c.thresholds.optimizer == ThresholdOptimizer::adam) {
    c.thresholds.m.resize(nu);
    c.thresholds.v.resize(nu);
    c.thresholds.steps.resize(nu);
    r.get(std::span<double>(c.thresholds.m));
    r.get(std::span<double>(c.thresholds.v));
    r.get(std::span<std::uint64_t>(c.thresholds.steps));
  }
  c.epoch = r.get<std::uint64_t>();
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_checkpoint(c, out);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace talos
