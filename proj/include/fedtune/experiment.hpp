#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtune/data.hpp"
#include "fedtune/dispatch.hpp"
#include "fedtune/error.hpp"
#include "fedtune/flcore.hpp"
#include "fedtune/hpo.hpp"
#include "fedtune/model.hpp"
#include "fedtune/sched.hpp"

namespace fedtune::experiment {

using nlohmann::json;

enum class SamplerKind { random, adaptive, halving };

inline const char* to_string(SamplerKind s) {
  switch (s) {
    case SamplerKind::random: return "random";
    case SamplerKind::adaptive: return "adaptive";
    case SamplerKind::halving: return "halving";
  }
  return "?";
}

inline SamplerKind sampler_from_string(const std::string& s) {
  if (s == "random") return SamplerKind::random;
  if (s == "adaptive") return SamplerKind::adaptive;
  if (s == "halving") return SamplerKind::halving;
  throw ConfigError("hpo.sampler: unknown sampler '" + s + "' (expected random, adaptive or halving)");
}

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | csv
  std::size_t num_classes = 10;
  std::size_t input_dim = 20;
  std::size_t samples = 4000;
  double class_sep = 3.0;
  std::size_t server_samples = 1000;
  std::string csv_path;
  double server_fraction = 0.2;  // csv only

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

/// Per-client base_time is drawn log-uniformly from [base_min, base_max].
struct LatencyConfig {
  double base_min = 0.5;
  double base_max = 5.0;
  double jitter_sigma = 0.2;

  friend bool operator==(const LatencyConfig&, const LatencyConfig&) = default;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::size_t n_clients = 20;
  std::optional<double> alpha;  // required; there is no canonical value
  double split_train = 0.6, split_val = 0.2, split_test = 0.2;
  std::size_t min_train = 10;
  LatencyConfig latency;

  model::ModelKind model_kind = model::ModelKind::mlp;
  std::size_t hidden_dim = 16;
  double model_dropout = 0.0;

  hpo::SearchSpace search_space = hpo::default_tuned_space();
  model::TrainHp defaults{0.01, 0.0, 1, 32, 0.0};

  SamplerKind sampler = SamplerKind::adaptive;
  std::size_t budget_configs = 20;
  double epsilon = 0.1;
  std::size_t probe_interval = 5;

  std::size_t rounds_per_trial = 50;
  std::size_t eval_cadence = 5;
  flcore::AggregationMode aggregation = flcore::AggregationMode::weighted;
  std::size_t patience = 0;
  bool grouping = true;
  double grouping_window = 0.0;  // <= 0: automatic

  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "fedtune-out";
  std::size_t threads = 1;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// ---------------------------------------------------------------------------
// JSON (de)serialisation
// ---------------------------------------------------------------------------

inline json to_json(const ExperimentConfig& c) {
  json dims = json::array();
  for (const auto& d : c.search_space.dims)
    dims.push_back({{"name", d.name}, {"scale", hpo::to_string(d.scale)}, {"low", d.low},
                    {"high", d.high}, {"step", d.step}});
  json ds = {{"kind", c.dataset.kind}};
  if (c.dataset.kind == "csv") {
    ds["path"] = c.dataset.csv_path;
    ds["server_fraction"] = c.dataset.server_fraction;
  } else {
    ds["num_classes"] = c.dataset.num_classes;
    ds["input_dim"] = c.dataset.input_dim;
    ds["samples"] = c.dataset.samples;
    ds["class_sep"] = c.dataset.class_sep;
    ds["server_samples"] = c.dataset.server_samples;
  }
  json clients = {{"count", c.n_clients},
                  {"split", {c.split_train, c.split_val, c.split_test}},
                  {"min_train", c.min_train},
                  {"latency",
                   {{"base_min", c.latency.base_min},
                    {"base_max", c.latency.base_max},
                    {"jitter_sigma", c.latency.jitter_sigma}}}};
  if (c.alpha) clients["alpha"] = *c.alpha;
  return {
      {"dataset", ds},
      {"clients", clients},
      {"model",
       {{"kind", model::to_string(c.model_kind)},
        {"hidden_dim", c.hidden_dim},
        {"dropout_rate", c.model_dropout}}},
      {"search_space", dims},
      {"defaults",
       {{"learning_rate", c.defaults.learning_rate},
        {"weight_decay", c.defaults.weight_decay},
        {"local_epochs", c.defaults.local_epochs},
        {"batch_size", c.defaults.batch_size},
        {"dropout", c.defaults.dropout}}},
      {"hpo",
       {{"sampler", to_string(c.sampler)},
        {"budget_configs", c.budget_configs},
        {"epsilon", c.epsilon},
        {"probe_interval", c.probe_interval}}},
      {"federation",
       {{"rounds_per_trial", c.rounds_per_trial},
        {"eval_cadence", c.eval_cadence},
        {"aggregation", flcore::to_string(c.aggregation)},
        {"patience", c.patience},
        {"grouping", {{"enabled", c.grouping}, {"window", c.grouping_window}}}}},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir},
      {"threads", c.threads},
  };
}

namespace detail {

// Reads an optional field, reporting type errors with the full dotted path.
template <typename T>
void read(const json& obj, const std::string& key, const std::string& path, T& out) {
  if (!obj.is_object()) throw ConfigError(path + ": expected an object");
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path + "." + key + ": wrong type (got " + it->dump() + ")");
  }
}

inline const json& section(const json& root, const std::string& key) {
  static const json empty = json::object();
  auto it = root.find(key);
  if (it == root.end() || it->is_null()) return empty;
  if (!it->is_object()) throw ConfigError(key + ": expected an object");
  return *it;
}

inline void reject_unknown(const json& obj, const std::string& path,
                           std::initializer_list<const char*> known) {
  if (!obj.is_object()) return;
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw ConfigError((path.empty() ? k : path + "." + k) + ": unknown field");
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& root) {
  if (!root.is_object()) throw ConfigError("config: expected a JSON object");
  detail::reject_unknown(root, "", {"dataset", "clients", "model", "search_space", "defaults", "hpo",
                                    "federation", "seeds", "output_dir", "threads"});
  ExperimentConfig c;

  const auto& ds = detail::section(root, "dataset");
  detail::reject_unknown(ds, "dataset", {"kind", "num_classes", "input_dim", "samples", "class_sep",
                                         "server_samples", "path", "server_fraction"});
  detail::read(ds, "kind", "dataset", c.dataset.kind);
  detail::read(ds, "num_classes", "dataset", c.dataset.num_classes);
  detail::read(ds, "input_dim", "dataset", c.dataset.input_dim);
  detail::read(ds, "samples", "dataset", c.dataset.samples);
  detail::read(ds, "class_sep", "dataset", c.dataset.class_sep);
  detail::read(ds, "server_samples", "dataset", c.dataset.server_samples);
  detail::read(ds, "path", "dataset", c.dataset.csv_path);
  detail::read(ds, "server_fraction", "dataset", c.dataset.server_fraction);

  const auto& cl = detail::section(root, "clients");
  detail::reject_unknown(cl, "clients", {"count", "alpha", "split", "min_train", "latency"});
  detail::read(cl, "count", "clients", c.n_clients);
  if (cl.contains("alpha") && !cl["alpha"].is_null()) {
    double a = 0.0;
    detail::read(cl, "alpha", "clients", a);
    c.alpha = a;
  }
  if (cl.contains("split")) {
    std::vector<double> split;
    detail::read(cl, "split", "clients", split);
    if (split.size() != 3) throw ConfigError("clients.split: expected [train, val, test]");
    c.split_train = split[0];
    c.split_val = split[1];
    c.split_test = split[2];
  }
  detail::read(cl, "min_train", "clients", c.min_train);
  const auto& lat = detail::section(cl, "latency");
  detail::reject_unknown(lat, "clients.latency", {"base_min", "base_max", "jitter_sigma"});
  detail::read(lat, "base_min", "clients.latency", c.latency.base_min);
  detail::read(lat, "base_max", "clients.latency", c.latency.base_max);
  detail::read(lat, "jitter_sigma", "clients.latency", c.latency.jitter_sigma);

  const auto& m = detail::section(root, "model");
  detail::reject_unknown(m, "model", {"kind", "hidden_dim", "dropout_rate"});
  std::string kind = model::to_string(c.model_kind);
  detail::read(m, "kind", "model", kind);
  if (kind == "logistic") c.model_kind = model::ModelKind::logistic;
  else if (kind == "mlp") c.model_kind = model::ModelKind::mlp;
  else throw ConfigError("model.kind: expected logistic or mlp, got '" + kind + "'");
  detail::read(m, "hidden_dim", "model", c.hidden_dim);
  detail::read(m, "dropout_rate", "model", c.model_dropout);

  if (auto it = root.find("search_space"); it != root.end() && !it->is_null()) {
    if (it->is_string()) {
      const auto name = it->get<std::string>();
      if (name == "default") c.search_space = hpo::default_tuned_space();
      else if (name == "full") c.search_space = hpo::low_fidelity_space();
      else throw ConfigError("search_space: expected a list of dims, \"default\" or \"full\"");
    } else if (it->is_array()) {
      c.search_space.dims.clear();
      std::size_t i = 0;
      for (const auto& d : *it) {
        const std::string path = "search_space[" + std::to_string(i++) + "]";
        if (d.is_string()) {
          c.search_space.dims.push_back(hpo::low_fidelity_space().dim(d.get<std::string>()));
          continue;
        }
        detail::reject_unknown(d, path, {"name", "scale", "low", "high", "step"});
        hpo::HpDim dim;
        std::string scale = "linear";
        detail::read(d, "name", path, dim.name);
        detail::read(d, "scale", path, scale);
        detail::read(d, "low", path, dim.low);
        detail::read(d, "high", path, dim.high);
        detail::read(d, "step", path, dim.step);
        try {
          dim.scale = hpo::scale_from_string(scale);
        } catch (const ConfigError& e) {
          throw ConfigError(path + ".scale: " + e.what());
        }
        c.search_space.dims.push_back(dim);
      }
    } else {
      throw ConfigError("search_space: expected a list of dims");
    }
  }

  const auto& d = detail::section(root, "defaults");
  detail::reject_unknown(d, "defaults",
                         {"learning_rate", "weight_decay", "local_epochs", "batch_size", "dropout"});
  detail::read(d, "learning_rate", "defaults", c.defaults.learning_rate);
  detail::read(d, "weight_decay", "defaults", c.defaults.weight_decay);
  detail::read(d, "local_epochs", "defaults", c.defaults.local_epochs);
  detail::read(d, "batch_size", "defaults", c.defaults.batch_size);
  detail::read(d, "dropout", "defaults", c.defaults.dropout);

  const auto& h = detail::section(root, "hpo");
  detail::reject_unknown(h, "hpo", {"sampler", "budget_configs", "epsilon", "probe_interval"});
  std::string sampler = to_string(c.sampler);
  detail::read(h, "sampler", "hpo", sampler);
  c.sampler = sampler_from_string(sampler);
  detail::read(h, "budget_configs", "hpo", c.budget_configs);
  detail::read(h, "epsilon", "hpo", c.epsilon);
  detail::read(h, "probe_interval", "hpo", c.probe_interval);

  const auto& f = detail::section(root, "federation");
  detail::reject_unknown(f, "federation",
                         {"rounds_per_trial", "eval_cadence", "aggregation", "patience", "grouping"});
  detail::read(f, "rounds_per_trial", "federation", c.rounds_per_trial);
  detail::read(f, "eval_cadence", "federation", c.eval_cadence);
  std::string agg = flcore::to_string(c.aggregation);
  detail::read(f, "aggregation", "federation", agg);
  if (agg == "weighted") c.aggregation = flcore::AggregationMode::weighted;
  else if (agg == "uniform") c.aggregation = flcore::AggregationMode::uniform;
  else throw ConfigError("federation.aggregation: expected weighted or uniform, got '" + agg + "'");
  detail::read(f, "patience", "federation", c.patience);
  const auto& g = detail::section(f, "grouping");
  detail::reject_unknown(g, "federation.grouping", {"enabled", "window"});
  detail::read(g, "enabled", "federation.grouping", c.grouping);
  detail::read(g, "window", "federation.grouping", c.grouping_window);

  detail::read(root, "seeds", "config", c.seeds);
  detail::read(root, "output_dir", "config", c.output_dir);
  detail::read(root, "threads", "config", c.threads);
  return c;
}

/// Throws ConfigError naming the offending field.
inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw ConfigError(field + ": " + msg);
  };
  if (c.dataset.kind == "synthetic") {
    if (c.dataset.num_classes < 2) fail("dataset.num_classes", "must be >= 2");
    if (c.dataset.input_dim < 1) fail("dataset.input_dim", "must be >= 1");
    if (c.dataset.samples < c.dataset.num_classes) fail("dataset.samples", "must be >= num_classes");
    if (!(c.dataset.class_sep > 0.0)) fail("dataset.class_sep", "must be > 0");
    if (c.dataset.server_samples < 1) fail("dataset.server_samples", "must be >= 1");
  } else if (c.dataset.kind == "csv") {
    if (c.dataset.csv_path.empty()) fail("dataset.path", "required for csv datasets");
    if (!(c.dataset.server_fraction > 0.0 && c.dataset.server_fraction < 1.0))
      fail("dataset.server_fraction", "must lie in (0, 1)");
  } else {
    fail("dataset.kind", "expected synthetic or csv, got '" + c.dataset.kind + "'");
  }
  if (c.n_clients < 1) fail("clients.count", "must be >= 1");
  if (!c.alpha) fail("clients.alpha", "required (Dirichlet concentration)");
  if (!(*c.alpha > 0.0) || !std::isfinite(*c.alpha)) fail("clients.alpha", "must be > 0");
  for (double s : {c.split_train, c.split_val, c.split_test})
    if (s < 0.0 || s > 1.0) fail("clients.split", "fractions must lie in [0, 1]");
  if (std::abs(c.split_train + c.split_val + c.split_test - 1.0) > 1e-9)
    fail("clients.split", "fractions must sum to 1");
  if (c.min_train < 1) fail("clients.min_train", "must be >= 1");
  if (!(c.latency.base_min > 0.0)) fail("clients.latency.base_min", "must be > 0");
  if (!(c.latency.base_max >= c.latency.base_min)) fail("clients.latency.base_max", "must be >= base_min");
  if (!(c.latency.jitter_sigma >= 0.0)) fail("clients.latency.jitter_sigma", "must be >= 0");
  if (c.model_kind == model::ModelKind::mlp && c.hidden_dim < 1) fail("model.hidden_dim", "must be >= 1");
  if (!(c.model_dropout >= 0.0 && c.model_dropout < 1.0)) fail("model.dropout_rate", "must lie in [0, 1)");
  try {
    c.search_space.validate();
  } catch (const ConfigError& e) {
    fail("search_space", e.what());
  }
  for (const auto& d : c.search_space.dims)
    if (!hpo::is_known_hp(d.name))
      fail("search_space", "unknown hyperparameter '" + d.name +
                               "' (expected learning_rate, weight_decay, local_epochs, batch_size, dropout)");
  if (c.search_space.contains("batch_size") && hpo::grid(c.search_space.dim("batch_size")).front() < 1)
    fail("search_space", "batch_size grid must start at >= 1");
  if (c.search_space.contains("dropout") &&
      !(c.search_space.dim("dropout").low >= 0.0 && c.search_space.dim("dropout").high < 1.0))
    fail("search_space", "dropout must lie in [0, 1)");
  if (!(c.defaults.learning_rate >= 0.0)) fail("defaults.learning_rate", "must be >= 0");
  if (!(c.defaults.weight_decay >= 0.0)) fail("defaults.weight_decay", "must be >= 0");
  if (c.defaults.batch_size < 1) fail("defaults.batch_size", "must be >= 1");
  if (!(c.defaults.dropout >= 0.0 && c.defaults.dropout < 1.0)) fail("defaults.dropout", "must lie in [0, 1)");
  if (c.budget_configs < 1) fail("hpo.budget_configs", "must be >= 1");
  if (static_cast<double>(c.budget_configs) > c.search_space.cardinality())
    fail("hpo.budget_configs", "exceeds the number of distinct grid configs (" +
                                   std::to_string(static_cast<long long>(c.search_space.cardinality())) + ")");
  if (!(c.epsilon >= 0.0 && c.epsilon <= 1.0)) fail("hpo.epsilon", "must lie in [0, 1]");
  if (c.probe_interval < 1) fail("hpo.probe_interval", "must be >= 1");
  if (c.rounds_per_trial < 1) fail("federation.rounds_per_trial", "must be >= 1");
  if (c.eval_cadence < 1) fail("federation.eval_cadence", "must be >= 1");
  if (c.grouping_window < 0.0) fail("federation.grouping.window", "must be >= 0 (0 = automatic)");
  if (c.seeds.empty()) fail("seeds", "must list at least one seed");
  if (c.output_dir.empty()) fail("output_dir", "must not be empty");
  if (c.threads < 1) fail("threads", "must be >= 1");
}

/// Applies a `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
inline void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  std::string pointer;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("--set: malformed key '" + key + "'");
    pointer += "/" + part;
  }
  root[json::json_pointer(pointer)] = value;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  json j = json::parse(in, nullptr, false, true);
  if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
  return j;
}

/// Parse, apply overrides and the FEDTUNE_SEED environment override, then
/// validate.
inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides,
                                    const char* env_seed = nullptr) {
  json root = read_json_file(path);
  for (const auto& o : overrides) apply_override(root, o);
  auto cfg = config_from_json(root);
  if (env_seed != nullptr && *env_seed != '\0') {
    char* end = nullptr;
    const auto v = std::strtoull(env_seed, &end, 10);
    if (end == env_seed || *end != '\0') throw ConfigError("FEDTUNE_SEED: not an integer");
    cfg.seeds = {static_cast<std::uint64_t>(v)};
  }
  validate(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// World construction
// ---------------------------------------------------------------------------

inline flcore::ExperimentWorld build_world(const ExperimentConfig& c, std::uint64_t seed) {
  data::Dataset pool, server;
  if (c.dataset.kind == "csv") {
    auto all = data::load_csv(c.dataset.csv_path);
    std::vector<std::size_t> idx(all.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng = make_rng(derive_seed(seed, seed_tag("csv-holdout")));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_server = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(c.dataset.server_fraction * static_cast<double>(all.size()))));
    if (n_server >= all.size()) throw ConfigError("dataset.server_fraction leaves no client data");
    std::span<const std::size_t> all_idx(idx);
    auto server_idx = std::vector<std::size_t>(all_idx.begin(), all_idx.begin() + static_cast<std::ptrdiff_t>(n_server));
    auto pool_idx = std::vector<std::size_t>(all_idx.begin() + static_cast<std::ptrdiff_t>(n_server), all_idx.end());
    std::sort(server_idx.begin(), server_idx.end());
    std::sort(pool_idx.begin(), pool_idx.end());
    server = all.subset(server_idx);
    pool = all.subset(pool_idx);
  } else {
    const auto& d = c.dataset;
    auto all = data::gen_synthetic(d.num_classes, d.input_dim, d.samples + d.server_samples,
                                   d.class_sep, derive_seed(seed, seed_tag("dataset")));
    std::vector<std::size_t> pool_idx(d.samples), server_idx(d.server_samples);
    for (std::size_t i = 0; i < d.samples; ++i) pool_idx[i] = i;
    for (std::size_t i = 0; i < d.server_samples; ++i) server_idx[i] = d.samples + i;
    pool = all.subset(pool_idx);
    server = all.subset(server_idx);
  }

  flcore::ExperimentWorld w;
  w.seed = seed;
  w.spec = {c.model_kind, pool.input_dim(), c.model_kind == model::ModelKind::mlp ? c.hidden_dim : 0,
            pool.num_classes, c.model_dropout};
  w.spec.validate();
  w.server_val = std::move(server);
  w.defaults = c.defaults;
  if (c.model_dropout > 0.0 && c.defaults.dropout == 0.0) w.defaults.dropout = c.model_dropout;
  w.aggregation = c.aggregation;
  w.eval_cadence = c.eval_cadence;
  w.grouping = {c.grouping, c.grouping_window};
  w.patience = c.patience;

  auto shards = data::partition_dirichlet(pool, c.n_clients, *c.alpha,
                                          {c.split_train, c.split_val, c.split_test},
                                          derive_seed(seed, seed_tag("partition")),
                                          {c.min_train, 100});
  Rng lat_rng = make_rng(derive_seed(seed, seed_tag("latency-profile")));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double lo = std::log(c.latency.base_min), hi = std::log(c.latency.base_max);
  w.test_pool.num_classes = pool.num_classes;
  w.test_pool.features.cols = pool.input_dim();
  for (auto& s : shards) {
    flcore::ClientState cs;
    cs.client_id = s.client_id;
    cs.latency = {std::exp(lo + (hi - lo) * unit(lat_rng)), c.latency.jitter_sigma};
    cs.seed = derive_seed(seed, seed_tag("client"), s.client_id);
    w.test_pool.append(s.test);
    cs.shard = std::move(s);
    w.clients.push_back(std::move(cs));
  }
  w.validate();
  return w;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct SeedReport {
  std::uint64_t seed = 0;
  std::vector<flcore::TrialResult> trials;
  std::vector<std::vector<sched::Event>> events;  // per trial
  std::vector<hpo::FeedbackRecord> feedback;
  std::optional<std::size_t> best;                // index into trials
  double sim_time = 0.0;                          // summed trial makespans
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<SeedReport> seeds;

  std::vector<double> best_accuracies() const {
    std::vector<double> out;
    for (const auto& s : seeds) out.push_back(s.best ? s.trials[*s.best].accuracy : 0.0);
    return out;
  }
};

using Logger = std::function<void(const std::string&)>;

namespace detail {

inline std::string describe(const hpo::HpConfig& c) {
  std::string s;
  char buf[64];
  for (const auto& [k, v] : c.values()) {
    std::snprintf(buf, sizeof buf, "%s%s=%g", s.empty() ? "" : " ", k.c_str(), v);
    s += buf;
  }
  return s;
}

inline void log_trial(const Logger& log, std::uint64_t seed, std::size_t index, std::size_t budget,
                      const flcore::TrialResult& t) {
  if (!log) return;
  char buf[256];
  std::snprintf(buf, sizeof buf, "[seed %llu] trial %zu/%zu %s objective=%.6g accuracy=%.4f%s",
                static_cast<unsigned long long>(seed), index + 1, budget, t.config_id().c_str(),
                t.objective, t.accuracy, t.failed ? " (diverged)" : "");
  log(std::string(buf) + " final [" + describe(t.final_hp) + "]");
}

// Draws random grid configs, skipping any already issued for this seed.
inline hpo::HpConfig draw_unissued(const hpo::SearchSpace& space, std::uint64_t seed, std::size_t slot,
                                   const std::set<std::string>& issued) {
  for (std::size_t attempt = 0; attempt < 10000; ++attempt) {
    auto c = hpo::suggest_random(space, derive_seed(seed, seed_tag("random-trial"), slot, attempt));
    if (!issued.count(c.config_id())) return c;
  }
  // Exhaustive fallback over the product grid.
  std::vector<std::vector<double>> grids;
  for (const auto& d : space.dims) grids.push_back(hpo::grid(d));
  std::vector<std::size_t> idx(grids.size(), 0);
  for (;;) {
    std::map<std::string, double> v;
    for (std::size_t i = 0; i < grids.size(); ++i) v[space.dims[i].name] = grids[i][idx[i]];
    hpo::HpConfig c(std::move(v));
    if (!issued.count(c.config_id())) return c;
    std::size_t k = 0;
    while (k < idx.size() && ++idx[k] == grids[k].size()) idx[k++] = 0;
    if (k == idx.size()) throw ConfigError("search space exhausted");
  }
}

inline std::vector<sched::Event> sync_events(const flcore::TrialResult& t) {
  std::vector<sched::Event> out;
  for (const auto& p : t.trace)
    out.push_back({p.sim_time, sched::EventKind::round, 0, t.config_id(), p.round, {}, {}});
  return out;
}

inline void pick_best(SeedReport& r) {
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    const auto& t = r.trials[i];
    if (t.failed || !std::isfinite(t.objective)) continue;
    if (!r.best || t.objective < r.trials[*r.best].objective) r.best = i;
  }
}

inline SeedReport run_random(const ExperimentConfig& c, const flcore::ExperimentWorld& w,
                             std::uint64_t seed, const Logger& log) {
  SeedReport r;
  r.seed = seed;
  std::set<std::string> issued;
  for (std::size_t t = 0; t < c.budget_configs; ++t) {
    const auto hp = draw_unissued(c.search_space, seed, t, issued);
    issued.insert(hp.config_id());
    r.trials.push_back(flcore::run_trial(hp, c.rounds_per_trial, w));
    r.events.push_back(sync_events(r.trials.back()));
    r.sim_time += r.trials.back().sim_time;
    log_trial(log, seed, t, c.budget_configs, r.trials.back());
  }
  return r;
}

inline SeedReport run_halving(const ExperimentConfig& c, const flcore::ExperimentWorld& w,
                              std::uint64_t seed, const Logger& log) {
  SeedReport r;
  r.seed = seed;
  std::set<std::string> issued;
  std::vector<hpo::HpConfig> configs;
  for (std::size_t t = 0; t < c.budget_configs; ++t) {
    configs.push_back(draw_unissued(c.search_space, seed, t, issued));
    issued.insert(configs.back().config_id());
  }
  r.trials.resize(configs.size());
  std::vector<std::size_t> alive(configs.size());
  for (std::size_t i = 0; i < alive.size(); ++i) alive[i] = i;
  const auto rungs = hpo::halving_rungs(c.budget_configs, c.rounds_per_trial);
  for (std::size_t k = 0; k < rungs.size(); ++k) {
    for (std::size_t i : alive) {
      r.trials[i] = flcore::run_trial(configs[i], rungs[k].rounds, w);
      r.sim_time += r.trials[i].sim_time;
    }
    if (k + 1 == rungs.size()) break;
    std::stable_sort(alive.begin(), alive.end(), [&](auto a, auto b) {
      return r.trials[a].objective < r.trials[b].objective;
    });
    alive.resize(rungs[k + 1].configs);
    std::sort(alive.begin(), alive.end());
  }
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    r.events.push_back(sync_events(r.trials[i]));
    log_trial(log, seed, i, c.budget_configs, r.trials[i]);
  }
  return r;
}

inline SeedReport run_adaptive(const ExperimentConfig& c, const flcore::ExperimentWorld& w,
                               std::uint64_t seed, const Logger& log) {
  SeedReport r;
  r.seed = seed;
  hpo::FeedbackStore store;
  hpo::AdaptiveEngine engine(c.search_space, store,
                             {c.epsilon, derive_seed(seed, seed_tag("adaptive"))});
  sched::DispatchOptions opts;
  opts.barrier = !c.grouping;
  opts.window = c.grouping_window;
  opts.probe_interval = c.probe_interval;
  opts.max_rounds = c.rounds_per_trial;
  std::set<std::string> issued;
  for (std::size_t t = 0; t < c.budget_configs; ++t) {
    hpo::HpConfig start;
    pick_best(r);
    if (r.best && !issued.count(r.trials[*r.best].final_hp.config_id()))
      start = r.trials[*r.best].final_hp;
    else
      start = draw_unissued(c.search_space, seed, t, issued);
    issued.insert(start.config_id());
    auto out = sched::dispatch(start, w, engine, opts);
    r.sim_time += out.makespan;
    r.trials.push_back(std::move(out.trial));
    r.events.push_back(std::move(out.events));
    log_trial(log, seed, t, c.budget_configs, r.trials.back());
  }
  r.best.reset();
  r.feedback = store.history();
  return r;
}

}  // namespace detail

inline SeedReport run_seed(const ExperimentConfig& c, std::uint64_t seed, const Logger& log = {}) {
  const auto world = build_world(c, seed);
  SeedReport r;
  switch (c.sampler) {
    case SamplerKind::random: r = detail::run_random(c, world, seed, log); break;
    case SamplerKind::halving: r = detail::run_halving(c, world, seed, log); break;
    case SamplerKind::adaptive: r = detail::run_adaptive(c, world, seed, log); break;
  }
  detail::pick_best(r);
  return r;
}

/// Runs the sampler loop for every seed. Seeds are independent and may run
/// on up to `config.threads` workers; results are ordered by seed position.
inline ExperimentReport run_experiment(const ExperimentConfig& c, const Logger& log = {}) {
  validate(c);
  ExperimentReport report;
  report.config = c;
  report.seeds.resize(c.seeds.size());
  if (c.threads <= 1 || c.seeds.size() == 1) {
    for (std::size_t i = 0; i < c.seeds.size(); ++i) report.seeds[i] = run_seed(c, c.seeds[i], log);
    return report;
  }
  std::mutex log_mu;
  Logger safe_log = [&](const std::string& s) {
    std::lock_guard lock(log_mu);
    if (log) log(s);
  };
  for (std::size_t begin = 0; begin < c.seeds.size(); begin += c.threads) {
    std::vector<std::future<SeedReport>> jobs;
    for (std::size_t i = begin; i < std::min(c.seeds.size(), begin + c.threads); ++i)
      jobs.push_back(std::async(std::launch::async, [&, i] { return run_seed(c, c.seeds[i], safe_log); }));
    for (std::size_t k = 0; k < jobs.size(); ++k) report.seeds[begin + k] = jobs[k].get();
  }
  return report;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

inline std::string fmt_num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// Creates the directory and proves it is writable.
inline void prepare_output_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  const auto probe = std::filesystem::path(dir) / ".fedtune-write-test";
  {
    std::ofstream out(probe);
    if (!out || !(out << "ok")) throw IoError("output directory '" + dir + "' is not writable");
  }
  std::filesystem::remove(probe, ec);
}

inline json report_json(const ExperimentReport& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json e = {{"seed", s.seed},
              {"trials", s.trials.size()},
              {"failed", std::count_if(s.trials.begin(), s.trials.end(), [](const auto& t) { return t.failed; })},
              {"sim_time_total", s.sim_time}};
    if (s.best) {
      const auto& b = s.trials[*s.best];
      e["best"] = {{"trial", *s.best},
                   {"config_id", b.config_id()},
                   {"hp", hpo::to_json(b.hp)},
                   {"final_config_id", b.final_hp.config_id()},
                   {"final_hp", hpo::to_json(b.final_hp)},
                   {"objective", b.objective},
                   {"accuracy", b.accuracy},
                   {"rounds", b.rounds_run}};
      e["checkpoint"] = "checkpoint_seed" + std::to_string(s.seed) + ".json";
    } else {
      e["best"] = nullptr;
    }
    seeds.push_back(e);
  }
  auto acc = r.best_accuracies();
  std::sort(acc.begin(), acc.end());
  double mean = 0.0;
  for (double a : acc) mean += a;
  mean = acc.empty() ? 0.0 : mean / static_cast<double>(acc.size());
  return {{"format", "fedtune.report"},
          {"version", 1},
          {"sampler", to_string(r.config.sampler)},
          {"budget_configs", r.config.budget_configs},
          {"rounds_per_trial", r.config.rounds_per_trial},
          {"search_space_size", r.config.search_space.cardinality()},
          {"config", to_json(r.config)},
          {"seeds", seeds},
          {"summary", {{"median_best_accuracy", sched::median(acc)}, {"mean_best_accuracy", mean}}}};
}

/// Writes trials.csv, curves.csv, report.json, events.jsonl, feedback.jsonl
/// and one checkpoint per seed into `dir`.
inline void emit_metrics(const ExperimentReport& r, const std::string& dir) {
  prepare_output_dir(dir);
  const auto path = [&](const std::string& f) { return (std::filesystem::path(dir) / f).string(); };
  auto open = [&](const std::string& f) {
    std::ofstream out(path(f), std::ios::binary);
    if (!out) throw IoError("cannot write " + path(f));
    return out;
  };
  const auto names = r.config.search_space.names();
  const std::string sampler = to_string(r.config.sampler);

  {
    auto out = open("trials.csv");
    out << "seed,sampler,config_id";
    for (const auto& n : names) out << ',' << n;
    out << ",objective,accuracy,trial,final_config_id,rounds,sim_time,status\n";
    for (const auto& s : r.seeds)
      for (std::size_t i = 0; i < s.trials.size(); ++i) {
        const auto& t = s.trials[i];
        out << s.seed << ',' << sampler << ',' << t.config_id();
        for (const auto& n : names) out << ',' << fmt_num(t.hp.at(n));
        out << ',' << fmt_num(t.objective) << ',' << fmt_num(t.accuracy) << ',' << i << ','
            << t.final_hp.config_id() << ',' << t.rounds_run << ',' << fmt_num(t.sim_time) << ','
            << (t.failed ? "diverged" : "ok") << '\n';
      }
  }
  {
    auto out = open("curves.csv");
    out << "seed,sampler,round,accuracy,loss,sim_time\n";
    for (const auto& s : r.seeds) {
      if (!s.best) continue;
      for (const auto& p : s.trials[*s.best].trace)
        out << s.seed << ',' << sampler << ',' << p.round << ',' << fmt_num(p.accuracy) << ','
            << fmt_num(p.global_loss) << ',' << fmt_num(p.sim_time) << '\n';
    }
  }
  {
    auto out = open("events.jsonl");
    for (const auto& s : r.seeds)
      for (std::size_t i = 0; i < s.events.size(); ++i)
        for (const auto& e : s.events[i]) {
          auto j = sched::to_json(e);
          j["seed"] = s.seed;
          j["trial"] = i;
          out << j.dump() << '\n';
        }
  }
  {
    auto out = open("feedback.jsonl");
    for (const auto& s : r.seeds)
      for (const auto& f : s.feedback) {
        auto j = hpo::to_json(f);
        j["seed"] = s.seed;
        out << j.dump() << '\n';
      }
  }
  for (const auto& s : r.seeds) {
    if (!s.best) continue;
    const auto& b = s.trials[*s.best];
    auto out = open("checkpoint_seed" + std::to_string(s.seed) + ".json");
    out << json{{"format", "fedtune.checkpoint"},
                {"version", 1},
                {"seed", s.seed},
                {"config_id", b.config_id()},
                {"final_hp", hpo::to_json(b.final_hp)},
                {"layout_id", b.weights.layout_id},
                {"weights", b.weights.values}}
               .dump()
        << '\n';
  }
  {
    auto out = open("report.json");
    out << report_json(r).dump(2) << '\n';
  }
}

}  // namespace fedtune::experiment
