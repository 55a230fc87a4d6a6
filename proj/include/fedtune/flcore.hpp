#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtune/data.hpp"
#include "fedtune/error.hpp"
#include "fedtune/hpo.hpp"
#include "fedtune/model.hpp"
#include "fedtune/random.hpp"
#include "fedtune/sched.hpp"

namespace fedtune::flcore {

using hpo::FeedbackKind;
using hpo::FeedbackRecord;
using hpo::HpConfig;
using model::WeightVector;

enum class AggregationMode { weighted, uniform };

inline const char* to_string(AggregationMode m) {
  return m == AggregationMode::weighted ? "weighted" : "uniform";
}

struct ClientUpdate {
  WeightVector weights;
  std::size_t n_samples = 0;
};

/// FedAvg. Weighted mode returns sum(n_c / N * w_c); uniform mode the plain
/// mean.
inline WeightVector fedavg_aggregate(std::span<const ClientUpdate> updates, AggregationMode mode) {
  if (updates.empty()) throw AggregationError("nothing to aggregate");
  const auto& first = updates.front().weights;
  double total = 0.0;
  for (const auto& u : updates) {
    if (u.weights.layout_id != first.layout_id || u.weights.size() != first.size())
      throw AggregationError("cannot aggregate layouts " + first.layout_id + " and " +
                             u.weights.layout_id);
    if (mode == AggregationMode::weighted && u.n_samples < 1)
      throw AggregationError("weighted aggregation needs n_samples >= 1 for every update");
    total += mode == AggregationMode::weighted ? static_cast<double>(u.n_samples) : 1.0;
  }
  WeightVector out;
  out.layout_id = first.layout_id;
  out.values.assign(first.size(), 0.0);
  for (const auto& u : updates) {
    const double share =
        (mode == AggregationMode::weighted ? static_cast<double>(u.n_samples) : 1.0) / total;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += share * u.weights.values[i];
  }
  if (!out.all_finite()) throw AggregationError("aggregate has non-finite entries");
  return out;
}

/// Sample-count-weighted mean of per-client losses: sum(|D_c| / |D| * loss_c).
inline double weighted_objective(std::span<const std::pair<double, std::size_t>> losses) {
  double total = 0.0, acc = 0.0;
  for (const auto& [loss, n] : losses) total += static_cast<double>(n);
  if (total <= 0.0) throw DataError("objective needs at least one sample");
  for (const auto& [loss, n] : losses) acc += static_cast<double>(n) / total * loss;
  return acc;
}

struct ClientState {
  std::size_t client_id = 0;
  data::DataShard shard;
  sched::LatencyProfile latency;
  WeightVector local_weights;
  std::uint64_t seed = 0;  // root of the client's batch-order and jitter streams
};

struct GroupingOptions {
  bool enabled = true;
  double window = 0.0;  // <= 0: a quarter of the median round-1 completion time
};

/// Everything a trial needs besides the hyperparameters under test.
struct ExperimentWorld {
  model::ModelSpec spec;
  std::vector<ClientState> clients;
  data::EvalSet server_val;
  data::EvalSet test_pool;
  model::TrainHp defaults;
  AggregationMode aggregation = AggregationMode::weighted;
  std::size_t eval_cadence = 5;
  GroupingOptions grouping;
  std::size_t patience = 0;  // 0 disables early stopping
  std::uint64_t seed = 0;

  void validate() const {
    spec.validate();
    if (clients.empty()) throw ConfigError("world has no clients");
    if (eval_cadence < 1) throw ConfigError("eval_cadence must be >= 1");
    if (server_val.empty()) throw ConfigError("world has no server validation set");
    for (const auto& c : clients) {
      c.latency.validate();
      if (c.shard.train.empty())
        throw DataError("client " + std::to_string(c.client_id) + " has no training data");
    }
  }

  WeightVector initial_weights() const {
    return model::init_weights(spec, derive_seed(seed, seed_tag("initial-weights")));
  }

  const data::EvalSet& accuracy_set() const { return test_pool.empty() ? server_val : test_pool; }
};

struct RoundState {
  std::size_t round = 1;  // next round to run, 1-based
  std::size_t max_rounds = 1;
  WeightVector global_weights;
  HpConfig current_hp;
  double sim_time = 0.0;
  double group_window = 0.0;  // fixed after round 1 when grouping is on

  friend bool operator==(const RoundState& a, const RoundState& b) {
    return a.round == b.round && a.max_rounds == b.max_rounds &&
           a.global_weights == b.global_weights && a.current_hp == b.current_hp &&
           a.sim_time == b.sim_time && a.group_window == b.group_window;
  }
};

inline constexpr int kRoundStateVersion = 1;

inline nlohmann::json to_json(const RoundState& s) {
  return {{"format", "fedtune.round_state"},
          {"version", kRoundStateVersion},
          {"round", s.round},
          {"max_rounds", s.max_rounds},
          {"layout_id", s.global_weights.layout_id},
          {"global_weights", s.global_weights.values},
          {"current_hp", hpo::to_json(s.current_hp)},
          {"sim_time", s.sim_time},
          {"group_window", s.group_window}};
}

inline RoundState round_state_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "fedtune.round_state")
    throw ConfigError("not a round state snapshot");
  if (j.at("version").get<int>() != kRoundStateVersion)
    throw ConfigError("unsupported round state version " + j.at("version").dump());
  RoundState s;
  s.round = j.at("round").get<std::size_t>();
  s.max_rounds = j.at("max_rounds").get<std::size_t>();
  s.global_weights.layout_id = j.at("layout_id").get<std::string>();
  s.global_weights.values = j.at("global_weights").get<std::vector<double>>();
  s.current_hp = hpo::hp_config_from_json(j.at("current_hp"));
  s.sim_time = j.at("sim_time").get<double>();
  s.group_window = j.at("group_window").get<double>();
  return s;
}

struct TracePoint {
  std::size_t round = 0;
  double global_loss = 0.0;  // server validation loss
  double accuracy = 0.0;     // pooled client test accuracy
  double sim_time = 0.0;
};

struct RoundOutcome {
  RoundState next;
  std::vector<FeedbackRecord> local_feedbacks;  // one per client group
  std::optional<FeedbackRecord> global_feedback;
  std::vector<sched::ClientGroup> groups;
  TracePoint metrics;
};

inline std::uint64_t train_seed(const ClientState& c, std::size_t step, std::size_t variant = 0) {
  return derive_seed(c.seed, seed_tag("train"), step, variant);
}

inline std::uint64_t latency_seed(const ClientState& c, std::size_t step, std::size_t variant = 0) {
  return derive_seed(c.seed, seed_tag("latency"), step, variant);
}

/// Sample-weighted training loss of `w` over every client's train split.
inline double global_train_loss(const ExperimentWorld& world, std::span<const ClientState> clients,
                                const WeightVector& w) {
  std::vector<std::pair<double, std::size_t>> parts;
  for (const auto& c : clients)
    parts.emplace_back(model::mean_loss(world.spec, w.values, c.shard.train), c.shard.train.size());
  return weighted_objective(parts);
}

/// Objective of a trained global model: per-client validation loss weighted
/// by client data size. Clients without a validation split are skipped.
inline double trial_objective(const ExperimentWorld& world, std::span<const ClientState> clients,
                              const WeightVector& w) {
  std::vector<std::pair<double, std::size_t>> parts;
  for (const auto& c : clients)
    if (!c.shard.val.empty())
      parts.emplace_back(model::mean_loss(world.spec, w.values, c.shard.val), c.shard.size());
  if (parts.empty()) return model::mean_loss(world.spec, w.values, world.server_val);
  return weighted_objective(parts);
}

inline TracePoint measure(const ExperimentWorld& world, const WeightVector& w, std::size_t round,
                          double sim_time) {
  const auto val = model::evaluate(world.spec, w, world.server_val);
  const double acc = world.test_pool.empty()
                         ? val.accuracy
                         : model::evaluate(world.spec, w, world.test_pool).accuracy;
  return {round, val.loss, acc, sim_time};
}

/// One synchronous communication round: broadcast, local training, grouping
/// by simulated completion time, FedAvg over all clients (sorted by id), and
/// global feedback on evaluation-cadence rounds.
inline RoundOutcome run_round(const RoundState& state, std::vector<ClientState>& clients,
                              const HpConfig& hp, const ExperimentWorld& world) {
  if (clients.empty()) throw ConfigError("run_round needs at least one client");
  if (state.round < 1 || state.round > state.max_rounds)
    throw ConfigError("round index " + std::to_string(state.round) + " outside [1, " +
                      std::to_string(state.max_rounds) + "]");
  const auto train_hp = hpo::to_train_hp(hp, world.defaults);

  std::vector<std::size_t> order(clients.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](auto a, auto b) { return clients[a].client_id < clients[b].client_id; });

  std::vector<ClientUpdate> updates;
  std::vector<sched::Completion> completions;
  std::vector<model::TrainResult> results(clients.size());
  for (std::size_t i : order) {
    auto& c = clients[i];
    c.local_weights = state.global_weights;
    try {
      results[i] = model::local_train(world.spec, c.local_weights, train_hp, c.shard,
                                      train_seed(c, state.round));
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.detail(), static_cast<long>(c.client_id),
                            static_cast<long>(state.round), hp.config_id());
    }
    c.local_weights = results[i].weights;
    updates.push_back({c.local_weights, c.shard.train.size()});
    completions.push_back({c.client_id, sched::completion_time(c.latency, train_hp, c.shard.train.size(),
                                                               latency_seed(c, state.round))});
  }

  RoundOutcome out;
  out.next = state;
  out.next.global_weights = fedavg_aggregate(updates, world.aggregation);
  out.next.current_hp = hp;
  double round_time = 0.0;
  for (const auto& c : completions) round_time = std::max(round_time, c.time);
  out.next.sim_time = state.sim_time + round_time;

  double window = std::numeric_limits<double>::infinity();
  if (world.grouping.enabled) {
    if (out.next.group_window <= 0.0)
      out.next.group_window =
          world.grouping.window > 0.0 ? world.grouping.window : sched::default_window(completions);
    window = out.next.group_window;
  }
  out.groups = sched::form_groups(completions, window, hp.config_id());

  std::vector<std::size_t> index_of_id;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    if (clients[i].client_id >= index_of_id.size())
      index_of_id.resize(clients[i].client_id + 1, clients.size());
    index_of_id[clients[i].client_id] = i;
  }
  for (const auto& g : out.groups) {
    FeedbackRecord r;
    r.config_id = hp.config_id();
    r.round = state.round;
    r.kind = FeedbackKind::local;
    r.group_size = g.members.size();
    r.group_id = g.group_id;
    for (auto id : g.members) {
      const auto& res = results[index_of_id[id]];
      r.train_loss += res.train_loss;
      r.val_loss += res.val_loss;
    }
    r.train_loss /= static_cast<double>(g.members.size());
    r.val_loss /= static_cast<double>(g.members.size());
    out.local_feedbacks.push_back(r);
  }

  out.metrics = measure(world, out.next.global_weights, state.round, out.next.sim_time);
  if (state.round % world.eval_cadence == 0) {
    FeedbackRecord g;
    g.config_id = hp.config_id();
    g.round = state.round;
    g.kind = FeedbackKind::global;
    g.val_loss = out.metrics.global_loss;
    g.train_loss = global_train_loss(world, clients, out.next.global_weights);
    g.group_size = clients.size();
    out.global_feedback = g;
  }
  out.next.round = state.round + 1;
  return out;
}

struct TrialResult {
  HpConfig hp;        // config the trial was issued with
  HpConfig final_hp;  // config in effect when the trial ended
  double objective = std::numeric_limits<double>::infinity();
  double accuracy = 0.0;
  std::vector<TracePoint> trace;
  std::size_t rounds_run = 0;
  double sim_time = 0.0;
  bool failed = false;
  std::string failure;
  WeightVector weights;

  const std::string& config_id() const { return hp.config_id(); }
};

namespace detail {

// Tracks consecutive non-improving rounds for early stopping.
struct Patience {
  std::size_t limit = 0;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;

  bool should_stop(double loss) {
    if (limit == 0) return false;
    if (loss < best) {
      best = loss;
      stale = 0;
      return false;
    }
    return ++stale >= limit;
  }
};

}  // namespace detail

/// Trains a fresh global model for up to `budget_rounds` synchronous rounds
/// under a fixed config. Divergence marks the trial failed instead of
/// throwing.
inline TrialResult run_trial(const HpConfig& hp, std::size_t budget_rounds,
                             const ExperimentWorld& world) {
  if (budget_rounds < 1) throw ConfigError("budget_rounds must be >= 1");
  TrialResult result;
  result.hp = hp;
  result.final_hp = hp;
  auto clients = world.clients;
  RoundState state;
  state.max_rounds = budget_rounds;
  state.global_weights = world.initial_weights();
  state.current_hp = hp;
  detail::Patience patience{world.patience};
  try {
    while (state.round <= budget_rounds) {
      auto outcome = run_round(state, clients, hp, world);
      state = std::move(outcome.next);
      result.trace.push_back(outcome.metrics);
      if (patience.should_stop(outcome.metrics.global_loss)) break;
    }
    result.objective = trial_objective(world, clients, state.global_weights);
    result.accuracy = model::evaluate(world.spec, state.global_weights, world.accuracy_set()).accuracy;
    if (!std::isfinite(result.objective)) throw DivergenceError("non-finite objective");
  } catch (const DivergenceError& e) {
    result.failed = true;
    result.failure = e.what();
    result.objective = std::numeric_limits<double>::infinity();
    result.accuracy = 0.0;
  }
  result.rounds_run = state.round - 1;
  result.sim_time = state.sim_time;
  result.weights = state.global_weights;
  return result;
}

}  // namespace fedtune::flcore
