#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_support.hpp"

using namespace fedtune;

namespace {

// Independent reference classifier: full-batch logistic regression with a
// single weight vector (binary labels), trained by plain gradient descent.
double reference_binary_fit_accuracy(const data::Dataset& ds) {
  const std::size_t d = ds.input_dim();
  std::vector<double> w(d + 1, 0.0);
  for (int it = 0; it < 500; ++it) {
    std::vector<double> g(d + 1, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto x = ds.features.row(i);
      double z = w[d];
      for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
      const double err = 1.0 / (1.0 + std::exp(-z)) - ds.labels[i];
      for (std::size_t j = 0; j < d; ++j) g[j] += err * x[j];
      g[d] += err;
    }
    for (std::size_t j = 0; j <= d; ++j) w[j] -= 0.1 * g[j] / static_cast<double>(ds.size());
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto x = ds.features.row(i);
    double z = w[d];
    for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
    correct += (z > 0.0) == (ds.labels[i] == 1);
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

double total_variation_from_uniform(const std::vector<double>& h) {
  double tv = 0.0;
  for (double p : h) tv += std::abs(p - 1.0 / static_cast<double>(h.size()));
  return 0.5 * tv;
}

data::Dataset whole(const data::DataShard& s) {
  data::Dataset out = s.train;
  out.append(s.val);
  out.append(s.test);
  return out;
}

}  // namespace

TEST(Synthetic, WellSeparatedTwoClassIsLinearlySeparable) {
  const auto ds = data::gen_synthetic(2, 2, 200, 10.0, 1);
  EXPECT_GT(reference_binary_fit_accuracy(ds), 0.99);
}

TEST(Synthetic, SeedRepeatIsIdentical) {
  EXPECT_EQ(data::gen_synthetic(4, 3, 100, 2.0, 5), data::gen_synthetic(4, 3, 100, 2.0, 5));
  EXPECT_NE(data::gen_synthetic(4, 3, 100, 2.0, 5), data::gen_synthetic(4, 3, 100, 2.0, 6));
}

TEST(Synthetic, ClassCountsDifferByAtMostOne) {
  const auto ds = data::gen_synthetic(7, 3, 100, 2.0, 5);
  std::vector<int> counts(7, 0);
  for (int y : ds.labels) counts[static_cast<std::size_t>(y)]++;
  EXPECT_LE(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()),
            1);
}

TEST(Synthetic, MoreClassesThanDimensions) {
  const auto ds = data::gen_synthetic(10, 2, 100, 3.0, 5);
  EXPECT_EQ(ds.size(), 100u);
  EXPECT_EQ(ds.input_dim(), 2u);
}

TEST(Synthetic, TooFewSamplesIsConfigError) {
  EXPECT_THROW(data::gen_synthetic(10, 2, 9, 3.0, 5), ConfigError);
}

TEST(Partition, SingleClientGetsEverything) {
  const auto ds = data::gen_synthetic(3, 2, 90, 2.0, 1);
  const auto shards = data::partition_dirichlet(ds, 1, 0.5, {}, 1);
  ASSERT_EQ(shards.size(), 1u);
  EXPECT_EQ(shards[0].size(), ds.size());
  EXPECT_TRUE(fixtures::conserved(ds, shards));
}

TEST(Partition, ConservesSamples) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ds = data::gen_synthetic(5, 3, 500, 2.0, seed);
    EXPECT_TRUE(fixtures::conserved(ds, data::partition_dirichlet(ds, 6, 0.3, {}, seed)));
  }
}

TEST(Partition, SplitFractionsWithinOneSample) {
  const auto ds = data::gen_synthetic(5, 3, 1000, 2.0, 3);
  const data::SplitFractions f{0.7, 0.1, 0.2};
  for (const auto& s : data::partition_dirichlet(ds, 8, 1.0, f, 3)) {
    const double n = static_cast<double>(s.size());
    EXPECT_LE(std::abs(static_cast<double>(s.train.size()) - f.train * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(s.val.size()) - f.val * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(s.test.size()) - f.test * n), 1.0);
  }
}

TEST(Partition, Deterministic) {
  const auto ds = data::gen_synthetic(5, 3, 500, 2.0, 3);
  const auto a = data::partition_dirichlet(ds, 6, 0.5, {}, 9);
  const auto b = data::partition_dirichlet(ds, 6, 0.5, {}, 9);
  for (std::size_t c = 0; c < a.size(); ++c) {
    EXPECT_EQ(a[c].train, b[c].train);
    EXPECT_EQ(a[c].val, b[c].val);
    EXPECT_EQ(a[c].test, b[c].test);
  }
}

TEST(Partition, LargeAlphaIsNearUniform) {
  std::size_t ok_runs = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto ds = data::gen_synthetic(10, 10, 10000, 2.0, seed);
    std::size_t close = 0;
    for (const auto& s : data::partition_dirichlet(ds, 10, 1000.0, {}, seed))
      close += total_variation_from_uniform(data::label_histogram(whole(s))) <= 0.1;
    ok_runs += close >= 9;
  }
  EXPECT_EQ(ok_runs, 5u);
}

TEST(Partition, SmallAlphaHasLowerEntropy) {
  EXPECT_LT(fixtures::mean_entropy(0.1, 5), fixtures::mean_entropy(1000.0, 5));
}

TEST(Partition, EntropyNonDecreasingInAlpha) {
  double prev = -1.0;
  for (double alpha : {0.1, 1.0, 10.0, 100.0}) {
    const double h = fixtures::mean_entropy(alpha, 5);
    EXPECT_GE(h, prev) << "alpha=" << alpha;
    prev = h;
  }
}

TEST(Partition, InfeasibleMinimumIsPartitionError) {
  const auto ds = data::gen_synthetic(2, 2, 40, 2.0, 1);
  EXPECT_THROW(data::partition_dirichlet(ds, 10, 0.5, {}, 1, {10, 5}), PartitionError);
}

TEST(Partition, BadArgumentsAreConfigErrors) {
  const auto ds = data::gen_synthetic(2, 2, 40, 2.0, 1);
  EXPECT_THROW(data::partition_dirichlet(ds, 0, 0.5, {}, 1), ConfigError);
  EXPECT_THROW(data::partition_dirichlet(ds, 2, 0.0, {}, 1), ConfigError);
  EXPECT_THROW(data::partition_dirichlet(ds, 2, 1.0, {0.5, 0.5, 0.5}, 1), ConfigError);
}

TEST(Csv, LoadsWithAndWithoutHeader) {
  const auto dir = fixtures::temp_dir("csv");
  std::filesystem::create_directories(dir);
  const auto with = dir + "/with.csv", without = dir + "/without.csv";
  std::ofstream(with) << "f1,f2,label\n0.5,1.5,0\n-1,2,2\n";
  std::ofstream(without) << "0.5,1.5,0\n-1,2,2\n";
  const auto a = data::load_csv(with);
  const auto b = data::load_csv(without);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 2u);
  EXPECT_EQ(a.input_dim(), 2u);
  EXPECT_EQ(a.num_classes, 3u);
  EXPECT_EQ(a.labels[1], 2);
  EXPECT_DOUBLE_EQ(a.features.row(1)[0], -1.0);
}

TEST(Csv, RaggedRowsAndMissingFileFail) {
  const auto dir = fixtures::temp_dir("csv-bad");
  std::filesystem::create_directories(dir);
  std::ofstream(dir + "/bad.csv") << "1,2,0\n1,0\n";
  EXPECT_THROW(data::load_csv(dir + "/bad.csv"), DataError);
  EXPECT_THROW(data::load_csv(dir + "/missing.csv"), Error);
}
