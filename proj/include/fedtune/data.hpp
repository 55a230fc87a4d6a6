#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedtune/error.hpp"
#include "fedtune/random.hpp"

namespace fedtune::data {

/// Dense row-major matrix of samples.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}

  std::span<double> row(std::size_t i) { return {values.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * cols, cols};
  }

  void append_row(std::span<const double> r) {
    if (rows == 0 && cols == 0) cols = r.size();
    if (r.size() != cols) throw DataError("row width mismatch");
    values.insert(values.end(), r.begin(), r.end());
    ++rows;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Labelled samples. Also used for evaluation sets (server validation,
/// pooled test data).
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::size_t input_dim() const noexcept { return features.cols; }

  void validate() const {
    if (features.rows != labels.size())
      throw DataError("feature rows (" + std::to_string(features.rows) +
                      ") != label count (" + std::to_string(labels.size()) + ")");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
        throw DataError("label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes) + ")");
  }

  void push_back(std::span<const double> x, int y) {
    features.append_row(x);
    labels.push_back(y);
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.num_classes = num_classes;
    out.features = Matrix(0, features.cols);
    out.features.values.reserve(idx.size() * features.cols);
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(features.row(i), labels[i]);
    return out;
  }

  /// Concatenation; both sides must share feature width.
  void append(const Dataset& other) {
    if (other.empty()) return;
    if (features.cols == 0 && features.rows == 0) features.cols = other.features.cols;
    if (other.features.cols != features.cols) throw DataError("feature width mismatch");
    features.values.insert(features.values.end(), other.features.values.begin(),
                           other.features.values.end());
    features.rows += other.features.rows;
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    num_classes = std::max(num_classes, other.num_classes);
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

using EvalSet = Dataset;

/// One client's allocation, split three ways.
struct DataShard {
  std::size_t client_id = 0;
  Dataset train;
  Dataset val;
  Dataset test;

  std::size_t size() const noexcept { return train.size() + val.size() + test.size(); }
};

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct PartitionOptions {
  std::size_t min_train = 10;
  std::size_t max_retries = 100;
};

/// Gaussian blobs with unit-variance noise. Class means sit on scaled basis
/// vectors (pairwise distance exactly class_sep) when num_classes <= input_dim,
/// otherwise on random directions at radius class_sep / sqrt(2). Labels are
/// assigned round-robin so class counts differ by at most one.
inline Dataset gen_synthetic(std::size_t num_classes, std::size_t input_dim,
                             std::size_t n, double class_sep, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  if (n < num_classes)
    throw ConfigError("n (" + std::to_string(n) + ") < num_classes (" +
                      std::to_string(num_classes) + ")");
  if (!(class_sep > 0.0) || !std::isfinite(class_sep))
    throw ConfigError("class_sep must be positive");

  Rng rng = make_rng(derive_seed(seed, seed_tag("synthetic")));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double radius = class_sep / std::sqrt(2.0);

  Matrix means(num_classes, input_dim);
  if (num_classes <= input_dim) {
    for (std::size_t k = 0; k < num_classes; ++k) means.row(k)[k] = radius;
  } else {
    for (std::size_t k = 0; k < num_classes; ++k) {
      auto m = means.row(k);
      double norm = 0.0;
      for (double& v : m) {
        v = normal(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (double& v : m) v *= radius / norm;
    }
  }

  Dataset ds;
  ds.num_classes = num_classes;
  ds.features = Matrix(n, input_dim);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = i % num_classes;
    ds.labels[i] = static_cast<int>(k);
    auto x = ds.features.row(i);
    auto m = means.row(k);
    for (std::size_t d = 0; d < input_dim; ++d) x[d] = m[d] + normal(rng);
  }
  return ds;
}

namespace detail {

inline std::vector<double> dirichlet(std::size_t n, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(n);
  for (;;) {
    double total = 0.0;
    for (double& v : p) {
      v = gamma(rng);
      total += v;
    }
    if (total > 0.0 && std::isfinite(total)) {
      for (double& v : p) v /= total;
      return p;
    }
  }
}

struct SplitCounts {
  std::size_t train, val, test;
};

inline SplitCounts split_counts(std::size_t n, const SplitFractions& f) {
  auto val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * f.val));
  auto test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * f.test));
  if (val + test > n) test = n - std::min(val, n);
  val = std::min(val, n - test);
  return {n - val - test, val, test};
}

}  // namespace detail

/// Non-IID label partition: for every class, proportions across clients are
/// drawn from Dirichlet(alpha) and the class's (shuffled) samples are cut at the
/// cumulative proportions. Each client's allocation is then shuffled and split
/// train/val/test. Draws that leave any client with fewer than
/// opts.min_train training samples are rejected and redrawn.
inline std::vector<DataShard> partition_dirichlet(const Dataset& ds, std::size_t n_clients,
                                                  double alpha, const SplitFractions& split,
                                                  std::uint64_t seed,
                                                  const PartitionOptions& opts = {}) {
  ds.validate();
  if (n_clients < 1) throw ConfigError("n_clients must be >= 1");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be positive");
  for (double f : {split.train, split.val, split.test})
    if (f < 0.0 || f > 1.0) throw ConfigError("split fractions must lie in [0, 1]");
  if (std::abs(split.train + split.val + split.test - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");

  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  Rng rng = make_rng(derive_seed(seed, seed_tag("dirichlet")));
  for (auto& idx : by_class) std::shuffle(idx.begin(), idx.end(), rng);

  std::vector<std::vector<std::size_t>> alloc;
  bool feasible = false;
  for (std::size_t attempt = 0; attempt < opts.max_retries && !feasible; ++attempt) {
    alloc.assign(n_clients, {});
    for (const auto& idx : by_class) {
      if (n_clients == 1) {
        alloc[0].insert(alloc[0].end(), idx.begin(), idx.end());
        continue;
      }
      const auto p = detail::dirichlet(n_clients, alpha, rng);
      double cum = 0.0;
      std::size_t begin = 0;
      for (std::size_t c = 0; c < n_clients; ++c) {
        cum += p[c];
        std::size_t end = c + 1 == n_clients
                              ? idx.size()
                              : std::min(idx.size(), static_cast<std::size_t>(std::floor(
                                                         cum * static_cast<double>(idx.size()))));
        end = std::max(end, begin);
        alloc[c].insert(alloc[c].end(), idx.begin() + static_cast<std::ptrdiff_t>(begin),
                        idx.begin() + static_cast<std::ptrdiff_t>(end));
        begin = end;
      }
    }
    feasible = std::all_of(alloc.begin(), alloc.end(), [&](const auto& a) {
      return detail::split_counts(a.size(), split).train >= opts.min_train;
    });
  }
  if (!feasible)
    throw PartitionError("could not give every client >= " + std::to_string(opts.min_train) +
                         " training samples after " + std::to_string(opts.max_retries) +
                         " Dirichlet draws (alpha=" + std::to_string(alpha) + ")");

  std::vector<DataShard> shards(n_clients);
  for (std::size_t c = 0; c < n_clients; ++c) {
    auto& a = alloc[c];
    std::sort(a.begin(), a.end());
    Rng local = make_rng(derive_seed(seed, seed_tag("split"), c));
    std::shuffle(a.begin(), a.end(), local);
    const auto counts = detail::split_counts(a.size(), split);
    std::span<const std::size_t> all(a);
    shards[c].client_id = c;
    shards[c].train = ds.subset(all.subspan(0, counts.train));
    shards[c].val = ds.subset(all.subspan(counts.train, counts.val));
    shards[c].test = ds.subset(all.subspan(counts.train + counts.val, counts.test));
  }
  return shards;
}

/// Label distribution of a set, as fractions.
inline std::vector<double> label_histogram(const Dataset& ds) {
  std::vector<double> h(ds.num_classes, 0.0);
  for (int y : ds.labels) h[static_cast<std::size_t>(y)] += 1.0;
  if (!ds.empty())
    for (double& v : h) v /= static_cast<double>(ds.size());
  return h;
}

/// Shannon entropy (nats) of the combined label distribution of a shard.
inline double shard_label_entropy(const DataShard& s) {
  std::vector<double> counts(s.train.num_classes, 0.0);
  double total = 0.0;
  for (const Dataset* part : {&s.train, &s.val, &s.test})
    for (int y : part->labels) {
      counts[static_cast<std::size_t>(y)] += 1.0;
      total += 1.0;
    }
  double h = 0.0;
  for (double c : counts)
    if (c > 0.0) h -= (c / total) * std::log(c / total);
  return h;
}

namespace detail {

inline bool parse_double(const std::string& s, double& out) {
  const char* b = s.c_str();
  char* end = nullptr;
  out = std::strtod(b, &end);
  if (end == b) return false;
  while (*end == ' ' || *end == '\t' || *end == '\r') ++end;
  return *end == '\0';
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

/// CSV rows of `features...,label`. A first row that does not parse as
/// numbers is treated as a header. num_classes is max(label) + 1.
inline Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV file: " + path);
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  std::vector<double> row;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() < 2) throw DataError(path + ":" + std::to_string(line_no) + ": need >= 2 columns");
    row.assign(cells.size() - 1, 0.0);
    bool numeric = true;
    for (std::size_t i = 0; i + 1 < cells.size() && numeric; ++i)
      numeric = detail::parse_double(cells[i], row[i]);
    double label_value = 0.0;
    numeric = numeric && detail::parse_double(cells.back(), label_value);
    if (!numeric) {
      if (ds.empty() && line_no == 1) continue;  // header
      throw DataError(path + ":" + std::to_string(line_no) + ": non-numeric cell");
    }
    if (label_value < 0 || label_value != std::floor(label_value))
      throw DataError(path + ":" + std::to_string(line_no) + ": label must be a nonnegative integer");
    const int y = static_cast<int>(label_value);
    ds.push_back(row, y);
    max_label = std::max(max_label, y);
  }
  if (ds.empty()) throw DataError("CSV file has no samples: " + path);
  ds.num_classes = static_cast<std::size_t>(std::max(max_label + 1, 2));
  return ds;
}

}  // namespace fedtune::data
