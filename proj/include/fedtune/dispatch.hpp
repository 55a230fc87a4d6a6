#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedtune/error.hpp"
#include "fedtune/flcore.hpp"
#include "fedtune/hpo.hpp"
#include "fedtune/model.hpp"
#include "fedtune/sched.hpp"

namespace fedtune::sched {

struct DispatchOptions {
  bool barrier = false;             // every step is one all-client group (synchronous FL)
  double window = 0.0;              // <= 0: quarter of the median first-step completion time
  std::size_t probe_interval = 1;   // a group probes and gets a new config every n-th step
  std::size_t max_reports = 0;      // stop after this many group reports; 0 = no limit
  std::size_t max_rounds = 0;       // stop after rounds * n_clients merged updates; 0 = no limit
};

struct DispatchResult {
  flcore::TrialResult trial;
  std::vector<Event> events;
  std::size_t reports = 0;
  std::size_t client_updates = 0;
  double makespan = 0.0;
};

/// Called after every event, with the store as it stands at that moment.
using EventHook = std::function<void(const Event&, const hpo::FeedbackStore&)>;

namespace detail {

struct MemberRun {
  std::size_t index = 0;                     // into world.clients
  std::vector<model::TrainResult> results;   // one per probe config, [0] = current
  std::size_t based_on = 0;                  // global version trained from
};

struct PendingGroup {
  std::size_t group_id = 0;
  double launched = 0.0;
  double finish = 0.0;
  std::size_t step = 1;
  hpo::HpConfig config;
  std::vector<hpo::ProbeConfig> probes;      // [0] = current config
  std::vector<MemberRun> members;            // sorted by client id
};

class Simulation {
 public:
  Simulation(const flcore::ExperimentWorld& world, hpo::AdaptiveEngine& engine,
             const DispatchOptions& opts, EventHook hook)
      : world_(world), engine_(engine), opts_(opts), hook_(std::move(hook)) {
    order_.resize(world.clients.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    std::sort(order_.begin(), order_.end(), [&](auto a, auto b) {
      return world.clients[a].client_id < world.clients[b].client_id;
    });
    table_.assign(world.clients.size(), world.initial_weights());
    train_loss_.assign(world.clients.size(), std::numeric_limits<double>::quiet_NaN());
    global_ = table_.front();
    for (const auto& c : world.clients) total_train_ += c.shard.train.size();
  }

  DispatchResult run(const hpo::HpConfig& start) {
    DispatchResult out;
    out.trial.hp = start;
    out.trial.final_hp = start;
    latest_issue_ = start;
    flcore::detail::Patience patience{world_.patience};
    try {
      launch(order_, 0.0, 1, start, out);
      while (!pending_.empty()) {
        auto node = pending_.extract(pending_.begin());
        const double now = node.key().first;
        PendingGroup group = std::move(node.mapped());
        const auto next = report(group, now, out);
        bool stop = (opts_.max_reports && out.reports >= opts_.max_reports);
        const std::size_t n = world_.clients.size();
        while (trace_round_ < round_cap() && out.client_updates >= (trace_round_ + 1) * n) {
          ++trace_round_;
          out.trial.trace.push_back(flcore::measure(world_, global_, trace_round_, now));
          emit({now, EventKind::round, group.group_id, next.config_id(), trace_round_, {}, {}}, out);
          if (patience.should_stop(out.trial.trace.back().global_loss)) stop = true;
        }
        if (opts_.max_rounds && out.client_updates >= opts_.max_rounds * n) stop = true;
        out.makespan = now;
        if (stop) break;
        std::vector<std::size_t> idx;
        for (const auto& m : group.members) idx.push_back(m.index);
        launch(idx, now, group.step + 1, next, out);
      }
      out.trial.objective = flcore::trial_objective(world_, world_.clients, global_);
      out.trial.accuracy =
          model::evaluate(world_.spec, global_, world_.accuracy_set()).accuracy;
    } catch (const DivergenceError& e) {
      out.trial.failed = true;
      out.trial.failure = e.what();
      out.trial.objective = std::numeric_limits<double>::infinity();
      out.trial.accuracy = 0.0;
    }
    out.trial.final_hp = latest_issue_;
    out.trial.rounds_run = trace_round_;
    out.trial.sim_time = out.makespan;
    out.trial.weights = global_;
    return out;
  }

 private:
  std::size_t round_cap() const {
    return opts_.max_rounds ? opts_.max_rounds : std::numeric_limits<std::size_t>::max();
  }

  void emit(Event e, DispatchResult& out) {
    if (hook_) hook_(e, engine_.store());
    out.events.push_back(std::move(e));
  }

  void launch(const std::vector<std::size_t>& members, double now, std::size_t step,
              const hpo::HpConfig& config, DispatchResult& out) {
    const bool decide = opts_.probe_interval > 0 && step % opts_.probe_interval == 0;
    std::vector<hpo::ProbeConfig> probes =
        decide ? engine_.probes(config) : std::vector<hpo::ProbeConfig>{{config, std::nullopt}};

    std::vector<Completion> completions;
    std::map<std::size_t, MemberRun> runs;
    for (std::size_t idx : members) {
      const auto& c = world_.clients[idx];
      MemberRun run{idx, {}, version_};
      double duration = 0.0;
      for (std::size_t v = 0; v < probes.size(); ++v) {
        const auto hp = hpo::to_train_hp(probes[v].config, world_.defaults);
        try {
          run.results.push_back(model::local_train(world_.spec, global_, hp, c.shard,
                                                   flcore::train_seed(c, step, v)));
        } catch (const DivergenceError& e) {
          throw DivergenceError(e.detail(), static_cast<long>(c.client_id),
                                static_cast<long>(step), probes[v].config.config_id());
        }
        duration += completion_time(c.latency, hp, c.shard.train.size(),
                                    flcore::latency_seed(c, step, v));
      }
      completions.push_back({c.client_id, duration});
      runs.emplace(c.client_id, std::move(run));
    }

    double window = std::numeric_limits<double>::infinity();
    if (!opts_.barrier) {
      if (window_ <= 0.0) window_ = opts_.window > 0.0 ? opts_.window : default_window(completions);
      window = window_;
    }
    for (auto& g : form_groups(completions, window, config.config_id())) {
      PendingGroup pg;
      pg.group_id = next_group_id_++;
      pg.launched = now;
      pg.finish = now + g.formation_time;
      pg.step = step;
      pg.config = config;
      pg.probes = probes;
      for (auto id : g.members) pg.members.push_back(std::move(runs.at(id)));
      emit({now, EventKind::launch, pg.group_id, config.config_id(), step, g.members, {}}, out);
      pending_.emplace(std::make_pair(pg.finish, pg.group_id), std::move(pg));
    }
  }

  model::WeightVector aggregate_with(const PendingGroup& g, std::size_t variant) const {
    std::vector<flcore::ClientUpdate> updates;
    updates.reserve(order_.size());
    std::size_t k = 0;
    for (std::size_t idx : order_) {
      // members are sorted by client id, as is order_
      if (k < g.members.size() && g.members[k].index == idx) {
        updates.push_back({g.members[k].results[variant].weights,
                           world_.clients[idx].shard.train.size()});
        ++k;
      } else {
        updates.push_back({table_[idx], world_.clients[idx].shard.train.size()});
      }
    }
    return flcore::fedavg_aggregate(updates, world_.aggregation);
  }

  hpo::HpConfig report(PendingGroup& g, double now, DispatchResult& out) {
    const std::size_t n = g.members.size();
    auto& store = engine_.store();

    // Feedback for every probed variant is measured against the table as it
    // stands before this group's merge.
    std::vector<hpo::ProbeResult> probe_results;
    const bool decide = g.probes.size() > 1 || (opts_.probe_interval > 0 &&
                                                 g.step % opts_.probe_interval == 0);
    if (decide) {
      for (std::size_t v = 1; v < g.probes.size(); ++v) {
        const auto w = aggregate_with(g, v);
        const double gf = model::evaluate(world_.spec, w, world_.server_val).loss;
        std::vector<double> lf;
        double tl = 0.0;
        for (const auto& m : g.members) {
          lf.push_back(m.results[v].val_loss);
          tl += m.results[v].train_loss;
        }
        const double combined = hpo::combine_feedback(lf, gf, n);
        store.record(g.probes[v].config.config_id(), combined);
        hpo::FeedbackRecord r{g.probes[v].config.config_id(), g.step, hpo::FeedbackKind::probe,
                              tl / static_cast<double>(n), mean(lf), n, g.probes[v].target,
                              combined, g.group_id};
        store.append(r);
        probe_results.push_back({g.probes[v].config, g.probes[v].target, combined});
      }
    }

    std::size_t staleness = 0;
    std::vector<double> lf;
    double tl = 0.0;
    for (const auto& m : g.members) {
      table_[m.index] = m.results[0].weights;
      train_loss_[m.index] = m.results[0].train_loss;
      staleness = std::max(staleness, version_ - m.based_on);
      lf.push_back(m.results[0].val_loss);
      tl += m.results[0].train_loss;
    }
    ++version_;
    global_ = aggregate_with(g, 0);
    const double gf = model::evaluate(world_.spec, global_, world_.server_val).loss;
    const double combined = hpo::combine_feedback(lf, gf, n);
    const auto& id = g.config.config_id();
    store.record(id, combined);
    store.append({id, g.step, hpo::FeedbackKind::local, tl / static_cast<double>(n), mean(lf), n,
                  std::nullopt, std::nullopt, g.group_id});
    store.append({id, g.step, hpo::FeedbackKind::global, global_train_loss(), gf,
                  world_.clients.size(), std::nullopt, std::nullopt, g.group_id});
    if (decide) {
      store.append({id, g.step, hpo::FeedbackKind::probe, tl / static_cast<double>(n), mean(lf), n,
                    std::nullopt, combined, g.group_id});
      probe_results.insert(probe_results.begin(), {g.config, std::nullopt, combined});
    }

    out.reports += 1;
    out.client_updates += n;
    std::vector<std::size_t> ids;
    for (const auto& m : g.members) ids.push_back(world_.clients[m.index].client_id);
    emit({now, EventKind::report, g.group_id, id, g.step, ids, staleness}, out);

    hpo::HpConfig next = decide ? engine_.next(g.config, probe_results) : g.config;
    latest_issue_ = next;
    emit({now, EventKind::issue, g.group_id, next.config_id(), g.step + 1, {}, {}}, out);
    return next;
  }

  double global_train_loss() const {
    // Only clients that have reported at least once contribute.
    double acc = 0.0, n = 0.0;
    for (std::size_t i = 0; i < train_loss_.size(); ++i) {
      if (!std::isfinite(train_loss_[i])) continue;
      const auto w = static_cast<double>(world_.clients[i].shard.train.size());
      acc += w * train_loss_[i];
      n += w;
    }
    return n > 0.0 ? acc / n : 0.0;
  }

  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }

  const flcore::ExperimentWorld& world_;
  hpo::AdaptiveEngine& engine_;
  DispatchOptions opts_;
  EventHook hook_;

  std::vector<std::size_t> order_;                 // client indices sorted by id
  std::vector<model::WeightVector> table_;         // latest reported weights per client
  std::vector<double> train_loss_;
  model::WeightVector global_;
  std::size_t total_train_ = 0;
  std::size_t version_ = 0;
  std::size_t next_group_id_ = 0;
  std::size_t trace_round_ = 0;
  double window_ = 0.0;
  hpo::HpConfig latest_issue_;
  std::map<std::pair<double, std::size_t>, PendingGroup> pending_;
};

}  // namespace detail

/// Runs the step-wise adaptive HPO loop over simulated time. Clients start
/// together on `start`; completions are grouped by time, and each group, on
/// arrival, merges its weights into the server table (staleness-unaware
/// FedAvg over every client's latest weights), reports combined feedback,
/// and is immediately re-launched with the engine's next config. Groups
/// never wait for each other unless `barrier` is set.
inline DispatchResult dispatch(const hpo::HpConfig& start, const flcore::ExperimentWorld& world,
                               hpo::AdaptiveEngine& engine, const DispatchOptions& opts,
                               EventHook hook = {}) {
  world.validate();
  if (opts.max_reports == 0 && opts.max_rounds == 0)
    throw ConfigError("dispatch needs a report or round budget");
  detail::Simulation sim(world, engine, opts, std::move(hook));
  return sim.run(start);
}

}  // namespace fedtune::sched
