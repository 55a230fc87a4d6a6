#pragma once

// Small worlds and reference computations shared by the test binaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fedtune/fedtune.hpp"

namespace fedtune::fixtures {

struct WorldShape {
  std::size_t n_clients = 4;
  double alpha = 1.0;
  std::size_t num_classes = 3;
  std::size_t input_dim = 5;
  std::size_t samples = 600;
  double class_sep = 4.0;
  std::size_t server_samples = 200;
  model::ModelKind kind = model::ModelKind::logistic;
  std::size_t hidden_dim = 8;
  double base_min = 0.5;
  double base_max = 5.0;
  double jitter = 0.0;
  std::size_t eval_cadence = 5;
  bool grouping = true;
};

inline flcore::ExperimentWorld make_world(const WorldShape& s, std::uint64_t seed) {
  auto all = data::gen_synthetic(s.num_classes, s.input_dim, s.samples + s.server_samples, s.class_sep,
                                 derive_seed(seed, 1));
  std::vector<std::size_t> pool_idx(s.samples), server_idx(s.server_samples);
  for (std::size_t i = 0; i < s.samples; ++i) pool_idx[i] = i;
  for (std::size_t i = 0; i < s.server_samples; ++i) server_idx[i] = s.samples + i;
  const auto pool = all.subset(pool_idx);

  flcore::ExperimentWorld w;
  w.seed = seed;
  w.spec = {s.kind, s.input_dim, s.kind == model::ModelKind::mlp ? s.hidden_dim : 0, s.num_classes, 0.0};
  w.server_val = all.subset(server_idx);
  w.defaults = {0.05, 0.0, 1, 32, 0.0};
  w.eval_cadence = s.eval_cadence;
  w.grouping = {s.grouping, 0.0};
  w.test_pool.num_classes = s.num_classes;
  w.test_pool.features.cols = s.input_dim;
  Rng rng = make_rng(derive_seed(seed, 2));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& shard : data::partition_dirichlet(pool, s.n_clients, s.alpha, {}, derive_seed(seed, 3))) {
    flcore::ClientState c;
    c.client_id = shard.client_id;
    c.latency = {s.base_min * std::pow(s.base_max / s.base_min, u(rng)), s.jitter};
    c.seed = derive_seed(seed, 4, shard.client_id);
    w.test_pool.append(shard.test);
    c.shard = std::move(shard);
    w.clients.push_back(std::move(c));
  }
  return w;
}

/// Central finite-difference gradient of the mean batch loss.
inline std::vector<double> numeric_gradient(const model::ModelSpec& spec, std::vector<double> w,
                                            const data::Dataset& ds, const std::vector<std::size_t>& batch,
                                            double h = 1e-6) {
  std::vector<double> g(w.size()), scratch(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double keep = w[i];
    w[i] = keep + h;
    const double up = model::loss_and_gradient(spec, w, ds, batch, scratch);
    w[i] = keep - h;
    const double down = model::loss_and_gradient(spec, w, ds, batch, scratch);
    w[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1e-6, |a_i| + |b_i|)
inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1e-6, std::abs(a[i]) + std::abs(b[i])));
  return worst;
}

/// Worst gradient error over `points` random (weights, batch) draws.
inline double gradient_check(model::ModelKind kind, std::size_t points, std::uint64_t seed) {
  const model::ModelSpec spec{kind, 4, kind == model::ModelKind::mlp ? 5u : 0u, 3, 0.0};
  const auto ds = data::gen_synthetic(3, 4, 30, 2.0, seed);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
  double worst = 0.0;
  for (std::size_t p = 0; p < points; ++p) {
    std::vector<double> w(spec.parameter_count());
    for (double& v : w) v = 0.7 * n01(rng);
    std::vector<std::size_t> batch(5);
    for (auto& b : batch) b = pick(rng);
    std::vector<double> g(w.size());
    model::loss_and_gradient(spec, w, ds, batch, g);
    worst = std::max(worst, max_relative_error(g, numeric_gradient(spec, w, ds, batch)));
  }
  return worst;
}

/// Reference weighted mean, coded without the library.
inline std::vector<double> brute_weighted_mean(const std::vector<std::vector<double>>& vs,
                                               const std::vector<double>& weights) {
  std::vector<double> out(vs.front().size(), 0.0);
  double total = 0.0;
  for (double x : weights) total += x;
  for (std::size_t j = 0; j < out.size(); ++j) {
    long double acc = 0.0L;
    for (std::size_t i = 0; i < vs.size(); ++i) acc += static_cast<long double>(weights[i]) * vs[i][j];
    out[j] = static_cast<double>(acc / total);
  }
  return out;
}

/// Multiset of rows (features then label) for conservation checks.
inline std::vector<std::vector<double>> rows_of(const data::Dataset& ds) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto r = ds.features.row(i);
    std::vector<double> row(r.begin(), r.end());
    row.push_back(ds.labels[i]);
    out.push_back(std::move(row));
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline bool conserved(const data::Dataset& ds, const std::vector<data::DataShard>& shards) {
  std::vector<std::vector<double>> got;
  for (const auto& s : shards)
    for (const auto* part : {&s.train, &s.val, &s.test})
      for (auto& r : rows_of(*part)) got.push_back(std::move(r));
  std::sort(got.begin(), got.end());
  return got == rows_of(ds);
}

inline double mean_entropy(double alpha, std::size_t seeds) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto ds = data::gen_synthetic(10, 10, 2000, 3.0, 100 + s);
    for (const auto& shard : data::partition_dirichlet(ds, 10, alpha, {}, 200 + s)) {
      total += data::shard_label_entropy(shard);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

inline std::string temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fedtune-test-" + name);
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace fedtune::fixtures
