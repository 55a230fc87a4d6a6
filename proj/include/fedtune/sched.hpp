#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtune/error.hpp"
#include "fedtune/model.hpp"
#include "fedtune/random.hpp"

namespace fedtune::sched {

/// Simulated speed of one client: `base_time` seconds per epoch per 100
/// samples, times a log-normal jitter with spread `jitter_sigma`.
struct LatencyProfile {
  double base_time = 1.0;
  double jitter_sigma = 0.0;

  void validate() const {
    if (!(base_time > 0.0) || !std::isfinite(base_time))
      throw ConfigError("latency base_time must be > 0");
    if (!(jitter_sigma >= 0.0) || !std::isfinite(jitter_sigma))
      throw ConfigError("latency jitter_sigma must be >= 0");
  }

  friend bool operator==(const LatencyProfile&, const LatencyProfile&) = default;
};

inline double completion_time(const LatencyProfile& profile, const model::TrainHp& hp,
                              std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw ConfigError("completion_time needs n_samples >= 1");
  double jitter = 1.0;
  if (profile.jitter_sigma > 0.0) {
    Rng rng = make_rng(derive_seed(seed, seed_tag("latency")));
    std::lognormal_distribution<double> dist(0.0, profile.jitter_sigma);
    jitter = dist(rng);
  }
  return profile.base_time * static_cast<double>(hp.local_epochs) *
         (static_cast<double>(n_samples) / 100.0) * jitter;
}

struct Completion {
  std::size_t client_id = 0;
  double time = 0.0;
};

struct ClientGroup {
  std::size_t group_id = 0;
  std::vector<std::size_t> members;  // sorted by client id
  double formation_time = 0.0;       // time the last member completed
  std::string hp_under_eval;
};

/// Greedy sweep over completions sorted by time: a group closes as soon as
/// the next completion is later than the group's first completion plus
/// `window`. Group ids are 0, 1, ... in completion order.
inline std::vector<ClientGroup> form_groups(std::vector<Completion> completions, double window,
                                            const std::string& config_id = {}) {
  if (completions.empty()) throw ConfigError("form_groups needs at least one completion");
  if (!(window > 0.0)) throw ConfigError("grouping window must be > 0");
  std::stable_sort(completions.begin(), completions.end(), [](const auto& a, const auto& b) {
    return a.time < b.time || (a.time == b.time && a.client_id < b.client_id);
  });
  std::vector<ClientGroup> groups;
  double opened_at = 0.0;
  for (const auto& c : completions) {
    if (groups.empty() || c.time > opened_at + window) {
      groups.push_back({groups.size(), {}, c.time, config_id});
      opened_at = c.time;
    }
    groups.back().members.push_back(c.client_id);
    groups.back().formation_time = std::max(groups.back().formation_time, c.time);
  }
  for (auto& g : groups) std::sort(g.members.begin(), g.members.end());
  return groups;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Grouping window used when none is configured: a quarter of the median
/// completion time.
inline double default_window(const std::vector<Completion>& first_round) {
  std::vector<double> t;
  for (const auto& c : first_round) t.push_back(c.time);
  const double w = 0.25 * median(std::move(t));
  return w > 0.0 ? w : 1e-9;
}

// ---------------------------------------------------------------------------
// Event trace
// ---------------------------------------------------------------------------

enum class EventKind { launch, report, issue, round };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::launch: return "launch";
    case EventKind::report: return "report";
    case EventKind::issue: return "issue";
    case EventKind::round: return "round";
  }
  return "?";
}

struct Event {
  double sim_time = 0.0;
  EventKind kind = EventKind::report;
  std::size_t group_id = 0;
  std::string config_id;
  std::size_t round = 0;
  std::vector<std::size_t> members;
  std::optional<std::size_t> staleness;  // max over members, reports only
};

inline nlohmann::json to_json(const Event& e) {
  nlohmann::json j = {{"sim_time", e.sim_time},
                      {"event_kind", to_string(e.kind)},
                      {"group_id", e.group_id},
                      {"config_id", e.config_id},
                      {"round", e.round}};
  if (!e.members.empty()) j["members"] = e.members;
  if (e.staleness) j["staleness"] = *e.staleness;
  return j;
}

inline void write_jsonl(std::ostream& out, const std::vector<Event>& events) {
  for (const auto& e : events) out << to_json(e).dump() << '\n';
}

}  // namespace fedtune::sched
