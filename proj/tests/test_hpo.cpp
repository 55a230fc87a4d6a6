#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "test_support.hpp"

using namespace fedtune;
using hpo::HpConfig;

namespace {

const hpo::SearchSpace kFull = hpo::low_fidelity_space();

std::vector<double> grid_of(const std::string& name) { return hpo::grid(kFull.dim(name)); }

HpConfig cfg(double lr, double wd, double epochs) {
  return HpConfig({{"learning_rate", lr}, {"weight_decay", wd}, {"local_epochs", epochs}});
}

std::vector<hpo::ProbeResult> score(const std::vector<hpo::ProbeConfig>& probes,
                                    const std::function<double(const HpConfig&)>& f) {
  std::vector<hpo::ProbeResult> out;
  for (const auto& p : probes) out.push_back({p.config, p.target, f(p.config)});
  return out;
}

}  // namespace

TEST(Grid, LearningRate) {
  const std::vector<double> want{1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
  EXPECT_EQ(grid_of("learning_rate"), want);
}

TEST(Grid, BatchSize) {
  const std::vector<double> want{16, 32, 64, 128, 256};
  EXPECT_EQ(grid_of("batch_size"), want);
}

TEST(Grid, LocalEpochs) {
  const auto g = grid_of("local_epochs");
  ASSERT_EQ(g.size(), 11u);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], static_cast<double>(i));
}

TEST(Grid, Dropout) {
  const std::vector<double> want{0.1, 0.3, 0.5};
  EXPECT_EQ(grid_of("dropout"), want);
}

TEST(Grid, WeightDecayIsNaturalLogSpaced) {
  const auto g = grid_of("weight_decay");
  ASSERT_EQ(g.size(), 10u);  // 1e-5 * e^k <= 0.1 for k = 0..9
  EXPECT_EQ(g.front(), 1e-5);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_NEAR(g[i] / g[i - 1], std::exp(1.0), 1e-12);
  EXPECT_LE(g.back(), 0.1);
}

TEST(Grid, IncludesLowNeverExceedsHigh) {
  const hpo::HpDim d{"x", hpo::Scale::linear, 0.5, 2.2, 0.5};
  const auto g = hpo::grid(d);
  EXPECT_EQ(g.front(), 0.5);
  EXPECT_EQ(g.back(), 2.0);
  EXPECT_EQ(g.size(), 4u);
}

TEST(Grid, InvalidDimsAreConfigErrors) {
  EXPECT_THROW(hpo::grid({"x", hpo::Scale::linear, 1.0, 0.5, 0.1}), ConfigError);
  EXPECT_THROW(hpo::grid({"x", hpo::Scale::log10, 0.0, 1.0, 10.0}), ConfigError);
  EXPECT_THROW(hpo::grid({"x", hpo::Scale::linear, 0.0, 1.0, 0.0}), ConfigError);
}

TEST(Snap, Examples) {
  const auto& lr = kFull.dim("learning_rate");
  EXPECT_EQ(hpo::snap(lr, 1e-3), 1e-3);
  EXPECT_EQ(hpo::snap(lr, 0.004), 1e-2);
  EXPECT_EQ(hpo::snap(lr, 5.0), 1e-1);
  EXPECT_EQ(hpo::snap(lr, 1e-9), 1e-5);
  EXPECT_EQ(hpo::snap(kFull.dim("local_epochs"), 5.5), 5.0);
  EXPECT_EQ(hpo::snap(kFull.dim("batch_size"), 90.0), 64.0);
}

TEST(Snap, AgreesWithNearestInLogCoordinate) {
  const auto& lr = kFull.dim("learning_rate");
  const auto g = hpo::grid(lr);
  Rng rng = make_rng(3);
  std::uniform_real_distribution<double> u(-5.5, -0.5);
  for (int i = 0; i < 500; ++i) {
    const double x = std::pow(10.0, u(rng));
    double best = g[0];
    for (double v : g)
      if (std::abs(std::log10(v) - std::log10(x)) < std::abs(std::log10(best) - std::log10(x))) best = v;
    EXPECT_EQ(hpo::snap(lr, x), best) << x;
  }
}

TEST(HpConfig, IdIsStableAndValueSensitive) {
  const auto a = cfg(1e-3, 1e-5, 2), b = cfg(1e-3, 1e-5, 2);
  EXPECT_EQ(a.config_id(), b.config_id());
  EXPECT_EQ(a.config_id().size(), 16u);
  EXPECT_NE(a.config_id(), cfg(1e-3, 1e-5, 3).config_id());
  EXPECT_EQ(hpo::hp_config_from_json(hpo::to_json(a)), a);
}

TEST(SuggestRandom, OnGridAndDeterministic) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto c = hpo::suggest_random(kFull, s);
    EXPECT_TRUE(hpo::on_grid(kFull, c));
    EXPECT_EQ(c, hpo::suggest_random(kFull, s));
  }
}

TEST(SuggestRandom, LearningRateFrequencies) {
  // Each of 5 points has p = 0.2; over 10000 draws sd = 0.004, so [0.17, 0.23]
  // is 7.5 standard deviations wide on each side.
  const hpo::SearchSpace space{{kFull.dim("learning_rate")}};
  std::map<double, int> counts;
  for (std::uint64_t s = 0; s < 10000; ++s) counts[hpo::suggest_random(space, s).at("learning_rate")]++;
  ASSERT_EQ(counts.size(), 5u);
  for (const auto& [v, n] : counts) {
    EXPECT_GE(n / 10000.0, 0.17) << v;
    EXPECT_LE(n / 10000.0, 0.23) << v;
  }
}

TEST(ProbeSet, SizeIsTunedPlusOne) {
  hpo::FeedbackStore store;
  const auto current = cfg(1e-3, 1e-5, 2);
  const std::vector<std::string> two{"learning_rate", "weight_decay"};
  EXPECT_EQ(hpo::probe_set(kFull, current, store, two).size(), 3u);
  EXPECT_EQ(hpo::probe_set(kFull, current, store, {}).size(), 1u);
}

TEST(ProbeSet, LowerBoundaryProbesUpward) {
  hpo::FeedbackStore store;
  const std::vector<std::string> lr{"learning_rate"};
  const auto p = hpo::probe_set(kFull, cfg(1e-5, 1e-5, 2), store, lr);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_FALSE(p[0].target.has_value());
  EXPECT_EQ(p[1].target, "learning_rate");
  EXPECT_EQ(p[1].config.at("learning_rate"), 1e-4);
}

TEST(ProbeSet, FollowsLastAcceptedDirectionAndFlipsAtBoundary) {
  hpo::FeedbackStore store;
  const std::vector<std::string> lr{"learning_rate"};
  store.note_accepted("learning_rate", -1);
  EXPECT_EQ(hpo::probe_set(kFull, cfg(1e-3, 1e-5, 2), store, lr)[1].config.at("learning_rate"), 1e-4);
  EXPECT_EQ(hpo::probe_set(kFull, cfg(1e-5, 1e-5, 2), store, lr)[1].config.at("learning_rate"), 1e-4);
  store.note_accepted("learning_rate", +1);
  EXPECT_EQ(hpo::probe_set(kFull, cfg(1e-1, 1e-5, 2), store, lr)[1].config.at("learning_rate"), 1e-2);
}

TEST(ProbeSet, NeighboursDifferInOneHpByOneStep) {
  hpo::FeedbackStore store;
  const auto names = kFull.names();
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto current = hpo::suggest_random(kFull, s);
    const auto probes = hpo::probe_set(kFull, current, store, names);
    ASSERT_EQ(probes.size(), names.size() + 1);
    for (std::size_t i = 1; i < probes.size(); ++i) {
      const auto& target = *probes[i].target;
      const auto g = hpo::grid(kFull.dim(target));
      const auto a = hpo::grid_index(g, current.at(target));
      const auto b = hpo::grid_index(g, probes[i].config.at(target));
      EXPECT_EQ(a > b ? a - b : b - a, 1u);
      for (const auto& n : names) {
        if (n != target) {
          EXPECT_EQ(probes[i].config.at(n), current.at(n));
        }
      }
    }
  }
}

TEST(ProbeSet, SinglePointGridIsSkipped) {
  const hpo::SearchSpace space{{kFull.dim("learning_rate"), {"dropout", hpo::Scale::linear, 0.3, 0.4, 0.5}}};
  hpo::FeedbackStore store;
  const HpConfig c({{"learning_rate", 1e-3}, {"dropout", 0.3}});
  const std::vector<std::string> names{"learning_rate", "dropout"};
  EXPECT_EQ(hpo::probe_set(space, c, store, names).size(), 2u);
}

TEST(CombineFeedback, Examples) {
  const std::vector<double> two{0.3, 0.7};
  EXPECT_DOUBLE_EQ(hpo::combine_feedback(two, 0.5, 2), 0.5);
  const std::vector<double> one{0.4};
  EXPECT_DOUBLE_EQ(hpo::combine_feedback(one, 0.2, 1), 0.3);
  const std::vector<double> same{0.9, 0.9, 0.9};
  EXPECT_DOUBLE_EQ(hpo::combine_feedback(same, 0.9, 3), 0.9);
}

TEST(CombineFeedback, Errors) {
  const std::vector<double> one{0.4};
  EXPECT_THROW(hpo::combine_feedback(one, std::nan(""), 1), FeedbackError);
  const std::vector<double> inf{INFINITY};
  EXPECT_THROW(hpo::combine_feedback(inf, 0.1, 1), FeedbackError);
  EXPECT_THROW(hpo::combine_feedback(one, 0.1, 2), FeedbackError);
}

TEST(FeedbackStore, Means) {
  hpo::FeedbackStore s;
  s.record("a", 0.4);
  EXPECT_DOUBLE_EQ(s.stats("a")->mean, 0.4);
  s.record("a", 0.6);
  EXPECT_DOUBLE_EQ(s.stats("a")->mean, 0.5);
  EXPECT_EQ(s.count("a"), 2u);
  EXPECT_FALSE(s.stats("b").has_value());
  EXPECT_THROW(s.record("a", NAN), FeedbackError);
}

TEST(FeedbackStore, HistoryIsAppendOnly) {
  hpo::FeedbackStore s;
  hpo::FeedbackRecord r;
  r.config_id = "x";
  r.round = 1;
  r.group_size = 1;
  s.append(r);
  r.round = 2;
  s.append(r);
  const auto h = s.history();
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[0].round, 1u);
  EXPECT_EQ(h[1].round, 2u);
  std::ostringstream out;
  s.export_jsonl(out);
  const auto text = out.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
}

TEST(SuggestAdaptive, NoImprovementKeepsCurrent) {
  hpo::FeedbackStore store;
  const auto space = hpo::default_tuned_space();
  const auto current = cfg(1e-3, 1e-5, 2);
  const auto results = score(hpo::probe_set(space, current, store, space.names()),
                             [&](const HpConfig& c) { return c == current ? 0.1 : 0.5; });
  const auto s = hpo::suggest_adaptive(space, current, results, {0.0, 1});
  EXPECT_EQ(s.config, current);
  EXPECT_TRUE(s.accepted.empty());
}

TEST(SuggestAdaptive, MovesOnlyTheImprovingCoordinate) {
  hpo::FeedbackStore store;
  const hpo::SearchSpace space{{kFull.dim("learning_rate"), kFull.dim("weight_decay")}};
  const HpConfig current({{"learning_rate", 1e-3}, {"weight_decay", 1e-5}});
  const auto probes = hpo::probe_set(space, current, store, space.names());
  auto results = score(probes, [](const HpConfig&) { return 1.0; });
  for (auto& r : results) {
    if (r.target == "learning_rate") r.combined = 0.5;
    if (r.target == "weight_decay") r.combined = 2.0;
  }
  const auto s = hpo::suggest_adaptive(space, current, results, {0.0, 1});
  EXPECT_EQ(s.config.at("learning_rate"), 1e-2);
  EXPECT_EQ(s.config.at("weight_decay"), 1e-5);
  ASSERT_EQ(s.accepted.size(), 1u);
  EXPECT_EQ(s.accepted[0].direction, 1);
}

TEST(SuggestAdaptive, EmptyResultsReturnCurrent) {
  const auto current = cfg(1e-3, 1e-5, 2);
  EXPECT_EQ(hpo::suggest_adaptive(hpo::default_tuned_space(), current, {}, {0.5, 1}).config, current);
}

TEST(SuggestAdaptive, ZeroEpsilonIsDeterministicAndOnGrid) {
  hpo::FeedbackStore store;
  const auto space = hpo::default_tuned_space();
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto current = hpo::suggest_random(space, s);
    Rng rng = make_rng(s);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto results = score(hpo::probe_set(space, current, store, space.names()),
                         [&](const HpConfig&) { return u(rng); });
    const auto a = hpo::suggest_adaptive(space, current, results, {0.0, s});
    const auto b = hpo::suggest_adaptive(space, current, results, {0.0, s + 1});
    EXPECT_EQ(a.config, b.config);
    EXPECT_TRUE(hpo::on_grid(space, a.config));
    const auto c = hpo::suggest_adaptive(space, current, results, {1.0, s});
    EXPECT_TRUE(hpo::on_grid(space, c.config));
    EXPECT_TRUE(c.explored.has_value());
  }
}

TEST(SuggestAdaptive, CoordinateDescentReachesGridOptimumOfSeparableBowl) {
  // Separable bowl on the grid; the exhaustive oracle finds its minimum.
  const auto space = hpo::default_tuned_space();
  auto f = [](const HpConfig& c) {
    const double a = std::log10(c.at("learning_rate")) + 2.0;
    const double b = std::log(c.at("weight_decay") / 1e-5) - 3.0;
    const double e = c.at("local_epochs") - 4.0;
    return a * a + 0.5 * b * b + 0.1 * e * e;
  };
  HpConfig best;
  double best_val = INFINITY;
  for (double lr : hpo::grid(space.dim("learning_rate")))
    for (double wd : hpo::grid(space.dim("weight_decay")))
      for (double ep : hpo::grid(space.dim("local_epochs")))
        if (const auto c = cfg(lr, wd, ep); f(c) < best_val) {
          best_val = f(c);
          best = c;
        }

  hpo::FeedbackStore store;
  hpo::AdaptiveEngine engine(space, store, {0.0, 5});
  auto current = cfg(1e-5, 1e-5, 0);
  std::size_t steps_to_lr = 0;
  for (std::size_t step = 1; step <= 30; ++step) {
    const auto results = score(engine.probes(current), f);
    current = engine.next(current, results);
    if (steps_to_lr == 0 && current.at("learning_rate") >= 1e-3) steps_to_lr = step;
  }
  EXPECT_EQ(current, best);
  EXPECT_GE(steps_to_lr, 1u);
  EXPECT_LE(steps_to_lr, 6u);
}

TEST(SuggestAdaptive, DependsOnlyOnLatestResults) {
  const auto space = hpo::default_tuned_space();
  const auto current = cfg(1e-3, 1e-5, 2);
  hpo::FeedbackStore quiet, noisy;
  // Same direction memory, very different history.
  Rng rng = make_rng(9);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int i = 0; i < 200; ++i) {
    noisy.record(hpo::suggest_random(space, static_cast<std::uint64_t>(i)).config_id(), u(rng));
    noisy.record(current.config_id(), u(rng));
  }
  hpo::AdaptiveEngine a(space, quiet, {0.3, 77}), b(space, noisy, {0.3, 77});
  for (int round = 0; round < 20; ++round) {
    const auto probes = a.probes(current);
    ASSERT_EQ(probes.size(), b.probes(current).size());
    const auto results = score(probes, [&](const HpConfig&) { return u(rng); });
    // Mutate older history in one store between calls.
    noisy.record(current.config_id(), u(rng));
    EXPECT_EQ(a.next(current, results), b.next(current, results));
  }
}

TEST(Halving, RungsShrinkAndEndAtFullBudget) {
  const auto r = hpo::halving_rungs(20, 50);
  ASSERT_FALSE(r.empty());
  EXPECT_EQ(r.front().configs, 20u);
  EXPECT_EQ(r.back().configs, 1u);
  EXPECT_EQ(r.back().rounds, 50u);
  for (std::size_t i = 1; i < r.size(); ++i) {
    EXPECT_EQ(r[i].configs, (r[i - 1].configs + 1) / 2);
    EXPECT_GE(r[i].rounds, r[i - 1].rounds);
  }
}
