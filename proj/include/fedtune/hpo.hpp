#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtune/error.hpp"
#include "fedtune/model.hpp"
#include "fedtune/random.hpp"

namespace fedtune::hpo {

// ---------------------------------------------------------------------------
// Search space
// ---------------------------------------------------------------------------

/// Grid scale. For the geometric scales (log10, log_e, pow2) `step` is the
/// ratio between neighbouring grid points; for linear it is the increment.
enum class Scale { log10, log_e, linear, pow2 };

inline const char* to_string(Scale s) {
  switch (s) {
    case Scale::log10: return "log10";
    case Scale::log_e: return "log_e";
    case Scale::linear: return "linear";
    case Scale::pow2: return "pow2";
  }
  return "?";
}

inline Scale scale_from_string(const std::string& s) {
  if (s == "log10") return Scale::log10;
  if (s == "log_e" || s == "ln") return Scale::log_e;
  if (s == "linear") return Scale::linear;
  if (s == "pow2") return Scale::pow2;
  throw ConfigError("unknown scale '" + s + "' (expected log10, log_e, linear or pow2)");
}

inline bool is_geometric(Scale s) { return s != Scale::linear; }

struct HpDim {
  std::string name;
  Scale scale = Scale::linear;
  double low = 0.0;
  double high = 1.0;
  double step = 1.0;

  void validate() const {
    const std::string where = "search space dim '" + name + "': ";
    if (name.empty()) throw ConfigError("search space dim without a name");
    if (!std::isfinite(low) || !std::isfinite(high) || !std::isfinite(step))
      throw ConfigError(where + "bounds and step must be finite");
    if (!(low < high)) throw ConfigError(where + "low must be < high");
    if (!(step > 0.0)) throw ConfigError(where + "step must be > 0");
    if (is_geometric(scale)) {
      if (!(low > 0.0)) throw ConfigError(where + "geometric scales need low > 0");
      if (!(step > 1.0)) throw ConfigError(where + "geometric step (ratio) must be > 1");
    }
  }

  friend bool operator==(const HpDim&, const HpDim&) = default;
};

namespace detail {

// Rounds to 15 significant digits so that grid points print and hash as the
// literals a user would write (0.1 rather than 0.10000000000000002).
inline double tidy(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.15g", v);
  return std::strtod(buf, nullptr);
}

inline double coordinate(const HpDim& d, double x) {
  return is_geometric(d.scale) ? std::log(x) : x;
}

}  // namespace detail

/// Low-fidelity grid of a dimension: low, low (+|*) step, ... up to high.
inline std::vector<double> grid(const HpDim& dim) {
  dim.validate();
  std::vector<double> out;
  const double limit = dim.high + 1e-9 * std::max(1e-300, std::abs(dim.high));
  for (std::size_t k = 0;; ++k) {
    const double kd = static_cast<double>(k);
    const double v = detail::tidy(is_geometric(dim.scale) ? dim.low * std::pow(dim.step, kd)
                                                           : dim.low + kd * dim.step);
    if (v > limit || (!out.empty() && v <= out.back())) break;
    out.push_back(std::min(v, dim.high));
    if (out.size() > 100000) throw ConfigError("grid for '" + dim.name + "' is too large");
  }
  return out;
}

/// Nearest grid point in the dimension's scale coordinate after clamping to
/// [low, high]. Exact ties resolve to the lower grid point.
inline double snap(const HpDim& dim, double x) {
  const auto g = grid(dim);
  if (std::isnan(x)) return g.front();
  x = std::clamp(x, dim.low, dim.high);
  const double cx = detail::coordinate(dim, x);
  std::size_t best = 0;
  double best_dist = std::abs(detail::coordinate(dim, g[0]) - cx);
  for (std::size_t i = 1; i < g.size(); ++i) {
    const double dist = std::abs(detail::coordinate(dim, g[i]) - cx);
    if (dist < best_dist) {
      best = i;
      best_dist = dist;
    }
  }
  return g[best];
}

inline std::size_t grid_index(const std::vector<double>& g, double v) {
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i] == v || std::abs(g[i] - v) <= 1e-12 * std::max(1.0, std::abs(v))) return i;
  return g.size();
}

struct SearchSpace {
  std::vector<HpDim> dims;

  void validate() const {
    if (dims.empty()) throw ConfigError("search space has no dimensions");
    for (std::size_t i = 0; i < dims.size(); ++i) {
      dims[i].validate();
      for (std::size_t j = 0; j < i; ++j)
        if (dims[j].name == dims[i].name)
          throw ConfigError("search space dim '" + dims[i].name + "' declared twice");
    }
  }

  const HpDim& dim(const std::string& name) const {
    for (const auto& d : dims)
      if (d.name == name) return d;
    throw ConfigError("unknown hyperparameter '" + name + "'");
  }

  bool contains(const std::string& name) const {
    return std::any_of(dims.begin(), dims.end(), [&](const HpDim& d) { return d.name == name; });
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& d : dims) out.push_back(d.name);
    return out;
  }

  /// Number of distinct configurations on the product grid.
  double cardinality() const {
    double n = 1.0;
    for (const auto& d : dims) n *= static_cast<double>(grid(d).size());
    return n;
  }

  friend bool operator==(const SearchSpace&, const SearchSpace&) = default;
};

/// The low-fidelity ranges and steps: learning rate, weight decay, local
/// epochs, batch size and dropout.
inline SearchSpace low_fidelity_space() {
  return SearchSpace{{
      {"learning_rate", Scale::log10, 1e-5, 1e-1, 10.0},
      {"weight_decay", Scale::log_e, 1e-5, 1e-1, std::exp(1.0)},
      {"local_epochs", Scale::linear, 0.0, 10.0, 1.0},
      {"batch_size", Scale::pow2, 16.0, 256.0, 2.0},
      {"dropout", Scale::linear, 0.1, 0.5, 0.2},
  }};
}

/// The subset tuned in the reported experiments: learning rate, local epochs
/// and weight decay.
inline SearchSpace default_tuned_space() {
  const auto full = low_fidelity_space();
  return SearchSpace{{full.dim("learning_rate"), full.dim("weight_decay"), full.dim("local_epochs")}};
}

inline bool is_known_hp(const std::string& name) {
  return name == "learning_rate" || name == "weight_decay" || name == "local_epochs" ||
         name == "batch_size" || name == "dropout";
}

// ---------------------------------------------------------------------------
// Configurations
// ---------------------------------------------------------------------------

/// One assignment of values to tuned hyperparameters, with a stable id
/// derived from the sorted (name, value) pairs.
class HpConfig {
 public:
  HpConfig() { refresh_id(); }
  explicit HpConfig(std::map<std::string, double> values) : values_(std::move(values)) {
    refresh_id();
  }

  const std::map<std::string, double>& values() const noexcept { return values_; }
  const std::string& config_id() const noexcept { return id_; }
  bool empty() const noexcept { return values_.empty(); }

  double at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("config has no value for '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return values_.count(name) != 0; }

  HpConfig with(const std::string& name, double value) const {
    auto v = values_;
    v[name] = value;
    return HpConfig(std::move(v));
  }

  /// "name=value;" pairs in name order; the hash input for config_id.
  std::string canonical() const {
    std::string s;
    char buf[64];
    for (const auto& [k, v] : values_) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      s += k;
      s += '=';
      s += buf;
      s += ';';
    }
    return s;
  }

  friend bool operator==(const HpConfig& a, const HpConfig& b) { return a.values_ == b.values_; }

 private:
  void refresh_id() {
    const auto h = seed_tag(canonical());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    id_ = buf;
  }

  std::map<std::string, double> values_;
  std::string id_;
};

inline nlohmann::json to_json(const HpConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : c.values()) j[k] = v;
  return j;
}

inline HpConfig hp_config_from_json(const nlohmann::json& j) {
  std::map<std::string, double> v;
  for (const auto& [k, val] : j.items()) v[k] = val.get<double>();
  return HpConfig(std::move(v));
}

inline bool on_grid(const SearchSpace& space, const HpConfig& c) {
  if (c.values().size() != space.dims.size()) return false;
  for (const auto& d : space.dims) {
    if (!c.has(d.name)) return false;
    const auto g = grid(d);
    if (grid_index(g, c.at(d.name)) == g.size()) return false;
  }
  return true;
}

/// Snaps every dimension of the space; missing values fall back to `low`.
inline HpConfig snap_config(const SearchSpace& space, const HpConfig& c) {
  std::map<std::string, double> v;
  for (const auto& d : space.dims) v[d.name] = snap(d, c.has(d.name) ? c.at(d.name) : d.low);
  return HpConfig(std::move(v));
}

/// Local training hyperparameters for a config; names absent from the
/// config keep their default.
inline model::TrainHp to_train_hp(const HpConfig& c, model::TrainHp defaults) {
  for (const auto& [k, v] : c.values()) {
    if (k == "learning_rate") defaults.learning_rate = v;
    else if (k == "weight_decay") defaults.weight_decay = v;
    else if (k == "local_epochs") defaults.local_epochs = static_cast<std::size_t>(std::llround(v));
    else if (k == "batch_size") defaults.batch_size = static_cast<std::size_t>(std::llround(v));
    else if (k == "dropout") defaults.dropout = v;
    else throw ConfigError("unknown hyperparameter '" + k + "'");
  }
  return defaults;
}

// ---------------------------------------------------------------------------
// Random search
// ---------------------------------------------------------------------------

/// Uniform over each dimension's grid, independently; deterministic in seed.
inline HpConfig suggest_random(const SearchSpace& space, std::uint64_t seed) {
  Rng rng = make_rng(derive_seed(seed, seed_tag("random-search")));
  std::map<std::string, double> v;
  for (const auto& d : space.dims) {
    const auto g = grid(d);
    std::uniform_int_distribution<std::size_t> pick(0, g.size() - 1);
    v[d.name] = g[pick(rng)];
  }
  return HpConfig(std::move(v));
}

// ---------------------------------------------------------------------------
// Feedback
// ---------------------------------------------------------------------------

enum class FeedbackKind { local, global, probe };

inline const char* to_string(FeedbackKind k) {
  switch (k) {
    case FeedbackKind::local: return "local";
    case FeedbackKind::global: return "global";
    case FeedbackKind::probe: return "probe";
  }
  return "?";
}

struct FeedbackRecord {
  std::string config_id;
  std::size_t round = 0;
  FeedbackKind kind = FeedbackKind::local;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::size_t group_size = 1;
  std::optional<std::string> probe_target;
  std::optional<double> combined;
  std::optional<std::size_t> group_id;

  void validate() const {
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss))
      throw FeedbackError("feedback losses must be finite");
    if (group_size < 1) throw FeedbackError("feedback group size must be >= 1");
  }
};

inline nlohmann::json to_json(const FeedbackRecord& r) {
  nlohmann::json j = {{"config_id", r.config_id},   {"round", r.round},
                      {"kind", to_string(r.kind)},  {"train_loss", r.train_loss},
                      {"val_loss", r.val_loss},     {"group_size", r.group_size}};
  if (r.probe_target) j["probe_target"] = *r.probe_target;
  if (r.combined) j["combined"] = *r.combined;
  if (r.group_id) j["group_id"] = *r.group_id;
  return j;
}

/// Combined feedback for one group: the global loss counts as n_j votes
/// against the n_j local losses, i.e. (n_j * gf + sum(lf)) / (2 * n_j).
inline double combine_feedback(std::span<const double> local_losses, double global_loss,
                               std::size_t group_size) {
  if (group_size < 1) throw FeedbackError("group size must be >= 1");
  if (local_losses.size() != group_size)
    throw FeedbackError("expected " + std::to_string(group_size) + " local losses, got " +
                        std::to_string(local_losses.size()));
  if (!std::isfinite(global_loss)) throw FeedbackError("global feedback is not finite");
  double local_sum = 0.0;
  for (double l : local_losses) {
    if (!std::isfinite(l)) throw FeedbackError("local feedback is not finite");
    local_sum += l;
  }
  const double n = static_cast<double>(group_size);
  return (n * global_loss + local_sum) / (2.0 * n);
}

/// Per-config running mean of combined feedback plus the full append-only
/// history. All members serialise on one mutex.
class FeedbackStore {
 public:
  struct Stats {
    double mean = 0.0;
    std::size_t count = 0;
  };

  FeedbackStore() = default;
  FeedbackStore(const FeedbackStore&) = delete;
  FeedbackStore& operator=(const FeedbackStore&) = delete;

  void record(const std::string& config_id, double combined) {
    if (!std::isfinite(combined)) throw FeedbackError("combined feedback is not finite");
    std::lock_guard lock(mu_);
    auto& a = acc_[config_id];
    // Neumaier-compensated running sum.
    const double t = a.sum + combined;
    a.comp += std::abs(a.sum) >= std::abs(combined) ? (a.sum - t) + combined
                                                    : (combined - t) + a.sum;
    a.sum = t;
    ++a.count;
  }

  void append(FeedbackRecord r) {
    r.validate();
    std::lock_guard lock(mu_);
    history_.push_back(std::move(r));
  }

  std::optional<Stats> stats(const std::string& config_id) const {
    std::lock_guard lock(mu_);
    auto it = acc_.find(config_id);
    if (it == acc_.end()) return std::nullopt;
    return Stats{(it->second.sum + it->second.comp) / static_cast<double>(it->second.count),
                 it->second.count};
  }

  std::size_t count(const std::string& config_id) const {
    auto s = stats(config_id);
    return s ? s->count : 0;
  }

  std::vector<FeedbackRecord> history() const {
    std::lock_guard lock(mu_);
    return history_;
  }

  std::size_t history_size() const {
    std::lock_guard lock(mu_);
    return history_.size();
  }

  /// Direction (+1 / -1) of the last accepted improvement for an HP; 0 if none.
  int last_direction(const std::string& hp) const {
    std::lock_guard lock(mu_);
    auto it = direction_.find(hp);
    return it == direction_.end() ? 0 : it->second;
  }

  void note_accepted(const std::string& hp, int direction) {
    std::lock_guard lock(mu_);
    direction_[hp] = direction >= 0 ? 1 : -1;
  }

  void export_jsonl(std::ostream& out) const {
    std::lock_guard lock(mu_);
    for (const auto& r : history_) out << to_json(r).dump() << '\n';
  }

 private:
  struct Accumulator {
    double sum = 0.0;
    double comp = 0.0;
    std::size_t count = 0;
  };

  mutable std::mutex mu_;
  std::map<std::string, Accumulator> acc_;
  std::map<std::string, int> direction_;
  std::vector<FeedbackRecord> history_;
};

// ---------------------------------------------------------------------------
// Step-wise adaptive sampler
// ---------------------------------------------------------------------------

struct ProbeConfig {
  HpConfig config;
  std::optional<std::string> target;  // empty for the current config
};

struct ProbeResult {
  HpConfig config;
  std::optional<std::string> target;
  double combined = 0.0;
};

/// The current config followed by one neighbour per tuned HP, each differing
/// from `current` in that HP only by one grid step. The step goes in the
/// direction of the last accepted improvement for that HP (upward when there
/// is none) and flips at a grid boundary. Single-point grids are skipped.
inline std::vector<ProbeConfig> probe_set(const SearchSpace& space, const HpConfig& current,
                                          const FeedbackStore& store,
                                          std::span<const std::string> tuned) {
  std::vector<ProbeConfig> out;
  out.push_back({current, std::nullopt});
  for (const auto& name : tuned) {
    const auto g = grid(space.dim(name));
    if (g.size() < 2) continue;
    const auto idx = grid_index(g, current.at(name));
    if (idx == g.size())
      throw ConfigError("value of '" + name + "' is not on its low-fidelity grid");
    int dir = store.last_direction(name);
    if (dir == 0) dir = 1;
    if ((dir > 0 && idx + 1 >= g.size()) || (dir < 0 && idx == 0)) dir = -dir;
    const auto next = dir > 0 ? idx + 1 : idx - 1;
    out.push_back({current.with(name, g[next]), name});
  }
  return out;
}

struct AdaptiveOptions {
  double epsilon = 0.1;
  std::uint64_t seed = 0;
};

struct Move {
  std::string hp;
  int direction = 0;
};

struct Suggestion {
  HpConfig config;
  std::vector<Move> accepted;
  std::optional<std::string> explored;
};

/// Coordinate-descent step on the latest probe results only: each tuned HP
/// takes its neighbour's value when that neighbour's combined feedback is
/// strictly lower than the current config's. With probability epsilon one
/// probed HP is then redrawn uniformly from its grid.
inline Suggestion suggest_adaptive(const SearchSpace& space, const HpConfig& current,
                                   std::span<const ProbeResult> latest,
                                   const AdaptiveOptions& opts) {
  Suggestion s{current, {}, std::nullopt};
  const auto base = std::find_if(latest.begin(), latest.end(), [&](const ProbeResult& r) {
    return !r.target && r.config == current;
  });
  if (base == latest.end()) return s;

  std::map<std::string, double> values = current.values();
  std::vector<std::string> targets;
  for (const auto& r : latest) {
    if (!r.target) continue;
    targets.push_back(*r.target);
    if (r.combined < base->combined) {
      const double from = current.at(*r.target);
      const double to = r.config.at(*r.target);
      values[*r.target] = to;
      s.accepted.push_back({*r.target, to > from ? 1 : -1});
    }
  }

  if (opts.epsilon > 0.0 && !targets.empty()) {
    Rng rng = make_rng(derive_seed(opts.seed, seed_tag("explore")));
    std::bernoulli_distribution explore(std::min(opts.epsilon, 1.0));
    if (explore(rng)) {
      std::uniform_int_distribution<std::size_t> pick_hp(0, targets.size() - 1);
      const auto& name = targets[pick_hp(rng)];
      const auto g = grid(space.dim(name));
      std::uniform_int_distribution<std::size_t> pick_value(0, g.size() - 1);
      values[name] = g[pick_value(rng)];
      s.explored = name;
    }
  }
  s.config = snap_config(space, HpConfig(std::move(values)));
  return s;
}

/// Ask/tell wrapper used by the federated loop: hands out probe sets and
/// turns the latest probe results into the next config, remembering the
/// direction of every accepted move.
class AdaptiveEngine {
 public:
  AdaptiveEngine(SearchSpace space, FeedbackStore& store, AdaptiveOptions opts)
      : space_(std::move(space)), tuned_(space_.names()), store_(&store), opts_(opts) {
    space_.validate();
  }

  const SearchSpace& space() const noexcept { return space_; }
  FeedbackStore& store() noexcept { return *store_; }
  std::size_t accepted_moves() const noexcept { return accepted_; }
  std::size_t suggestions() const noexcept { return calls_; }

  std::vector<ProbeConfig> probes(const HpConfig& current) const {
    return probe_set(space_, current, *store_, tuned_);
  }

  HpConfig next(const HpConfig& current, std::span<const ProbeResult> latest) {
    AdaptiveOptions o = opts_;
    o.seed = derive_seed(opts_.seed, calls_++);
    auto s = suggest_adaptive(space_, current, latest, o);
    for (const auto& m : s.accepted) store_->note_accepted(m.hp, m.direction);
    accepted_ += s.accepted.empty() ? 0 : 1;
    return s.config;
  }

 private:
  SearchSpace space_;
  std::vector<std::string> tuned_;
  FeedbackStore* store_;
  AdaptiveOptions opts_;
  std::size_t calls_ = 0;
  std::size_t accepted_ = 0;
};

// ---------------------------------------------------------------------------
// Successive halving (optional third sampler)
// ---------------------------------------------------------------------------

struct Rung {
  std::size_t configs = 0;
  std::size_t rounds = 0;
};

/// Halve the surviving configs and double the rounds until one config is
/// left; the last rung trains for the full `max_rounds`.
inline std::vector<Rung> halving_rungs(std::size_t budget, std::size_t max_rounds) {
  if (budget < 1 || max_rounds < 1) throw ConfigError("halving needs budget and rounds >= 1");
  std::vector<std::size_t> counts{budget};
  while (counts.back() > 1) counts.push_back((counts.back() + 1) / 2);
  std::vector<Rung> rungs;
  for (std::size_t r = 0; r < counts.size(); ++r) {
    const std::size_t shift = counts.size() - 1 - r;
    const std::size_t rounds = shift >= 63 ? 1 : std::max<std::size_t>(1, max_rounds >> shift);
    rungs.push_back({counts[r], rounds});
  }
  return rungs;
}

}  // namespace fedtune::hpo
