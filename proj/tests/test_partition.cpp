#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "colext/error.hpp"
#include "colext/partition.hpp"
#include "support.hpp"

using namespace colext;

namespace {

std::vector<std::size_t> histogram(const Dataset& d) {
  std::vector<std::size_t> h(d.num_classes, 0);
  for (auto l : d.labels) ++h[l];
  return h;
}

// Rows as sortable tuples so multisets can be compared.
std::vector<std::vector<float>> rows_of(const Dataset& d) {
  std::vector<std::vector<float>> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto r = std::vector<float>(d.row(i).begin(), d.row(i).end());
    r.push_back(d.labels[i]);
    out.push_back(std::move(r));
  }
  return out;
}

double mean_tv_distance(const std::vector<Dataset>& parts, std::uint32_t classes) {
  double total = 0.0;
  for (const auto& p : parts) {
    const auto h = histogram(p);
    double tv = 0.0;
    for (auto c : h) tv += std::abs(static_cast<double>(c) / p.size() - 1.0 / classes);
    total += tv / 2;
  }
  return total / parts.size();
}

}  // namespace

TEST(Synth, BalancedAndDeterministic) {
  const auto a = synth_dataset(3, 16, 200, 5);
  EXPECT_EQ(a.size(), 600u);
  EXPECT_EQ(histogram(a), (std::vector<std::size_t>{200, 200, 200}));
  EXPECT_EQ(encode_dataset(a), encode_dataset(synth_dataset(3, 16, 200, 5)));
  EXPECT_NE(encode_dataset(a), encode_dataset(synth_dataset(3, 16, 200, 6)));
}

TEST(Synth, WellSpreadBlobsAreSeparable) {
  // centralized oracle run: softmax regression on blobs with center_scale >> sigma
  const auto data = synth_dataset(3, 16, 200, 1, {3.0, 1.0});
  ModelSpec spec;
  spec.layer_widths = {16, 3};
  TrainConfig cfg;
  cfg.local_epochs = 20;
  cfg.learning_rate = 0.1;
  const auto trained = local_train(init_model(spec, 1), spec, data, cfg);
  EXPECT_GE(evaluate(trained.params, spec, data).accuracy, 0.99);
}

TEST(Partition, ExactCoverAndNoEmptyClient) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::uint32_t classes = 2 + rng() % 5;
    const std::uint32_t per_class = 3 + rng() % 40;
    const auto data = synth_dataset(classes, 2, per_class, rng());
    PartitionPlan plan;
    plan.num_clients = 1 + rng() % std::min<std::uint32_t>(12, classes * per_class / 3);
    plan.alpha = std::pow(10.0, -2.0 + static_cast<double>(rng() % 500) / 100.0);
    plan.seed = rng();
    const auto idx = partition_indices(data.labels, classes, plan);
    ASSERT_EQ(idx.size(), plan.num_clients);
    std::vector<std::size_t> all;
    for (const auto& part : idx) {
      EXPECT_GE(part.size(), 3u);
      EXPECT_TRUE(std::is_sorted(part.begin(), part.end()));
      all.insert(all.end(), part.begin(), part.end());
    }
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> want(data.size());
    std::iota(want.begin(), want.end(), 0);
    EXPECT_EQ(all, want) << "trial " << trial;

    auto got_rows = std::vector<std::vector<float>>{};
    for (const auto& part : dirichlet_partition(data, plan)) {
      auto r = rows_of(part);
      got_rows.insert(got_rows.end(), r.begin(), r.end());
    }
    auto want_rows = rows_of(data);
    std::sort(got_rows.begin(), got_rows.end());
    std::sort(want_rows.begin(), want_rows.end());
    EXPECT_EQ(got_rows, want_rows);
  }
}

TEST(Partition, SingleClientHoldsEverything) {
  const auto data = synth_dataset(3, 4, 10, 1);
  PartitionPlan plan;
  plan.num_clients = 1;
  plan.alpha = 0.1;
  const auto parts = dirichlet_partition(data, plan);
  ASSERT_EQ(parts.size(), 1u);
  EXPECT_EQ(encode_dataset(parts[0]), encode_dataset(data));
}

TEST(Partition, MinimumRows) {
  EXPECT_EQ(min_client_rows(0.2), 3u);
  EXPECT_EQ(min_client_rows(0.5), 2u);
  EXPECT_EQ(min_client_rows(0.9), 6u);
}

TEST(Partition, TooFewSamples) {
  const auto data = synth_dataset(2, 2, 2, 1);
  PartitionPlan plan;
  plan.num_clients = 5;
  EXPECT_THROW(dirichlet_partition(data, plan), InvalidArgument);
}

TEST(Partition, Deterministic) {
  const auto data = synth_dataset(4, 3, 50, 9);
  PartitionPlan plan;
  plan.num_clients = 6;
  plan.alpha = 0.5;
  plan.seed = 12;
  EXPECT_EQ(partition_indices(data.labels, 4, plan), partition_indices(data.labels, 4, plan));
}

TEST(Partition, LargeAlphaIsNearUniform) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto data = synth_dataset(4, 2, 500, seed);
    PartitionPlan plan;
    plan.num_clients = 5;
    plan.alpha = 1e9;
    plan.seed = seed;
    for (const auto& p : dirichlet_partition(data, plan)) {
      const auto h = histogram(p);
      const double uniform = static_cast<double>(p.size()) / 4;
      for (auto c : h) EXPECT_LE(std::abs(c - uniform) / uniform, 0.10);
    }
  }
}

TEST(Property, SkewShrinksAsAlphaGrows) {
  std::vector<double> tv;
  for (double alpha : {0.1, 1.0, 10.0, 1000.0}) {
    double sum = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto data = synth_dataset(5, 2, 200, seed);
      PartitionPlan plan;
      plan.num_clients = 8;
      plan.alpha = alpha;
      plan.seed = seed;
      sum += mean_tv_distance(dirichlet_partition(data, plan), 5);
    }
    tv.push_back(sum / 10);
  }
  for (std::size_t i = 1; i < tv.size(); ++i) EXPECT_LT(tv[i], tv[i - 1]) << i;
}

TEST(Partition, IidSplitIsNearUniform) {
  const auto data = synth_dataset(4, 2, 1000, 3);
  PartitionPlan plan;
  plan.num_clients = 4;
  plan.alpha.reset();
  for (const auto& p : dirichlet_partition(data, plan)) {
    EXPECT_EQ(p.size(), 1000u);
    for (auto c : histogram(p)) EXPECT_NEAR(static_cast<double>(c), 250.0, 60.0);
  }
}

TEST(Dirichlet, OnSimplex) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto w = sample_dirichlet(0.3, 7, s);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    for (double v : w) EXPECT_GE(v, 0.0);
  }
}

TEST(LargestRemainder, SumsExactly) {
  const std::vector<double> w{0.5, 0.25, 0.25};
  EXPECT_EQ(largest_remainder(10, w), (std::vector<std::size_t>{5, 3, 2}));
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto d = sample_dirichlet(1.0, 1 + rng() % 9, rng());
    const std::size_t n = rng() % 1000;
    const auto r = largest_remainder(n, d);
    EXPECT_EQ(std::accumulate(r.begin(), r.end(), std::size_t{0}), n);
  }
}

TEST(TrainValSplit, EightyTwenty) {
  const auto data = synth_dataset(2, 3, 50, 4);
  const auto s = train_val_split(data, 0.2, 1);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.val.size(), 20u);
  const auto again = train_val_split(data, 0.2, 1);
  EXPECT_EQ(encode_dataset(again.train), encode_dataset(s.train));
  EXPECT_EQ(encode_dataset(again.val), encode_dataset(s.val));

  auto rows = rows_of(s.train);
  auto val = rows_of(s.val);
  rows.insert(rows.end(), val.begin(), val.end());
  auto want = rows_of(data);
  std::sort(rows.begin(), rows.end());
  std::sort(want.begin(), want.end());
  EXPECT_EQ(rows, want);
}

TEST(TrainValSplit, EmptySideRejected) {
  const auto data = synth_dataset(2, 3, 1, 4);
  EXPECT_THROW(train_val_split(data, 0.2, 1), InvalidArgument);
  EXPECT_THROW(train_val_split(data, 0.0, 1), InvalidArgument);
}

// Pearson chi-square of the val class counts against the train proportions.
// With 4 classes (3 dof) the 0.999 quantile is 16.27.
TEST(TrainValSplit, ValMatchesTrainDistribution) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto data = synth_dataset(4, 2, 2000, seed);
    const auto s = train_val_split(data, 0.2, seed);
    const auto ht = histogram(s.train);
    const auto hv = histogram(s.val);
    double chi = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      const double expected = static_cast<double>(ht[c]) / s.train.size() * s.val.size();
      chi += (hv[c] - expected) * (hv[c] - expected) / expected;
    }
    EXPECT_LT(chi, 16.27) << seed;
  }
}

TEST(ShardFile, RoundTrip) {
  colext::testing::TempDir dir;
  const auto data = synth_dataset(3, 5, 7, 2);
  write_dataset_file(dir / "s.bin", data);
  EXPECT_EQ(encode_dataset(read_dataset_file(dir / "s.bin")), encode_dataset(data));
  auto bytes = encode_dataset(data);
  bytes.pop_back();
  EXPECT_ANY_THROW(decode_dataset(bytes));
}
