#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "fedzda/dataset.hpp"
#include "fedzda/errors.hpp"

using namespace fedzda;

namespace {

// Items are tagged by writing their index into the first pixel.
Dataset tagged_dataset(std::size_t classes, std::size_t per_class, bool sorted = true) {
  Dataset ds;
  ds.channels = 1;
  ds.height = 1;
  ds.width = 2;
  ds.classes = classes;
  const std::size_t n = classes * per_class;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(sorted ? i / per_class : i % classes);
    const float px[2] = {static_cast<float>(i) / static_cast<float>(n), static_cast<float>(label) / 16.0f};
    ds.push_back(px, label);
  }
  return ds;
}

using Item = std::pair<float, int>;

std::multiset<Item> items_of(const Dataset& ds) {
  std::multiset<Item> s;
  for (std::size_t i = 0; i < ds.size(); ++i) s.insert({ds.image(i)[0], ds.labels[i]});
  return s;
}

std::multiset<Item> union_of(const std::vector<ClientDataset>& clients) {
  std::multiset<Item> s;
  for (const auto& c : clients) {
    auto a = items_of(c.train), b = items_of(c.test);
    s.insert(a.begin(), a.end());
    s.insert(b.begin(), b.end());
  }
  return s;
}

std::size_t distinct_classes(const ClientDataset& c) {
  std::set<int> s(c.train.labels.begin(), c.train.labels.end());
  s.insert(c.test.labels.begin(), c.test.labels.end());
  return s.size();
}

}  // namespace

TEST(Unimodal, AtMostTwoClassesPerClient) {
  auto ds = tagged_dataset(10, 10);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto parts = partition_unimodal(ds, 10, 2, seed);
    ASSERT_EQ(parts.size(), 10u);
    for (const auto& c : parts) {
      EXPECT_LE(distinct_classes(c), 2u);
      EXPECT_EQ(c.size(), 10u);
    }
  }
}

TEST(Unimodal, UnionIsTheSourceMultiset) {
  auto ds = tagged_dataset(10, 17, false);
  auto parts = partition_unimodal(ds, 7, 3, 5);
  EXPECT_EQ(union_of(parts), items_of(ds));
  std::size_t total = 0;
  for (const auto& c : parts) total += c.size();
  EXPECT_EQ(total, ds.size());
}

TEST(Unimodal, ShardArithmetic) {
  // 50000 items, 100 clients, 2 shards → 200 shards of 250, 500 per client.
  const std::size_t n = 50000, clients = 100, spc = 2;
  const std::size_t shard = n / (clients * spc);
  EXPECT_EQ(shard, 250u);
  Dataset ds;
  ds.channels = ds.height = ds.width = 1;
  ds.classes = 10;
  ds.labels.resize(n);
  ds.images.assign(n, 0.5f);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % 10);
  auto parts = partition_unimodal(ds, clients, spc, 1);
  for (const auto& c : parts) {
    EXPECT_EQ(c.size(), spc * shard);
    EXPECT_LE(distinct_classes(c), 2u);
  }
}

TEST(Unimodal, RemainderJoinsLastShard) {
  auto ds = tagged_dataset(4, 13);  // 52 items, 10 shards of 5, last shard 7
  auto parts = partition_unimodal(ds, 5, 2, 3);
  std::vector<std::size_t> sizes;
  for (const auto& c : parts) sizes.push_back(c.size());
  std::sort(sizes.begin(), sizes.end());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{10, 10, 10, 10, 12}));
  EXPECT_EQ(union_of(parts), items_of(ds));
}

TEST(Unimodal, SeedDeterminismAndErrors) {
  auto ds = tagged_dataset(10, 10);
  auto a = partition_unimodal(ds, 10, 2, 9), b = partition_unimodal(ds, 10, 2, 9), c = partition_unimodal(ds, 10, 2, 10);
  bool all_same = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].train.images, b[i].train.images);
    all_same = all_same && a[i].train.images == c[i].train.images;
  }
  EXPECT_FALSE(all_same);
  EXPECT_THROW(partition_unimodal(ds, 60, 2, 1), ConfigError);
  EXPECT_THROW(partition_unimodal(ds, 0, 2, 1), ConfigError);
}

TEST(Multimodal, ClientsFollowGroupWeights) {
  auto ds = tagged_dataset(10, 20);
  const double w[] = {0.8, 0.2};
  auto groups = contiguous_groups(10, w);
  auto r = partition_multimodal(ds, 10, groups, 1);
  ASSERT_EQ(r.clients.size(), 10u);
  std::size_t from_a = 0, from_b = 0;
  for (const auto& c : r.clients) {
    const int first = c.train.labels.empty() ? c.test.labels[0] : c.train.labels[0];
    (first < 5 ? from_a : from_b)++;
    for (int l : c.train.labels) EXPECT_EQ(l < 5, first < 5);
  }
  EXPECT_EQ(from_a, 8u);
  EXPECT_EQ(from_b, 2u);
  EXPECT_TRUE(r.warnings.empty());
}

TEST(Multimodal, LargestRemainderGroupSizes) {
  auto ds = tagged_dataset(9, 20);
  const double w[] = {0.5, 0.3, 0.2};
  auto r = partition_multimodal(ds, 20, contiguous_groups(9, w), 4);
  std::map<int, std::size_t> by_group;
  for (const auto& c : r.clients) by_group[c.train.labels[0] / 3]++;
  EXPECT_EQ(by_group[0], 10u);
  EXPECT_EQ(by_group[1], 6u);
  EXPECT_EQ(by_group[2], 4u);
}

TEST(Multimodal, ImbalanceTracksWeightsAndRetainedItemsAreExact) {
  auto ds = tagged_dataset(10, 100);
  const double w[] = {0.6, 0.3, 0.1};
  auto groups = contiguous_groups(10, w);
  auto r = partition_multimodal(ds, 20, groups, 2);
  std::vector<double> hist(10, 0);
  std::size_t assigned = 0;
  for (const auto& c : r.clients) {
    for (std::size_t k = 0; k < 10; ++k) hist[k] += static_cast<double>(c.histogram[k]);
    assigned += c.size();
  }
  EXPECT_EQ(assigned + r.dropped, ds.size());
  // Per-class mass proportional to group weight / group size.
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (int c : groups[g].classes) {
      const double density = groups[g].weight / static_cast<double>(groups[g].classes.size());
      const double top = groups[0].weight / static_cast<double>(groups[0].classes.size());
      EXPECT_NEAR(hist[static_cast<std::size_t>(c)], 100.0 * density / top, 1.0) << "class " << c;
    }
  // Every retained item appears once and comes from the source.
  auto src = items_of(ds);
  auto got = union_of(r.clients);
  EXPECT_EQ(got.size(), assigned);
  for (const auto& it : got) EXPECT_EQ(src.count(it), got.count(it));
}

TEST(Multimodal, UniformWeightsGiveUniformHistogram) {
  auto ds = tagged_dataset(10, 50);
  const double w[] = {0.5, 0.5};
  auto r = partition_multimodal(ds, 10, contiguous_groups(10, w), 3);
  std::vector<std::size_t> hist(10, 0);
  for (const auto& c : r.clients)
    for (std::size_t k = 0; k < 10; ++k) hist[k] += c.histogram[k];
  for (auto h : hist) EXPECT_EQ(h, 50u);
  EXPECT_EQ(r.dropped, 0u);
}

TEST(Multimodal, StarvedGroupWarnsInsteadOfFailing) {
  auto ds = tagged_dataset(10, 10);
  const double w[] = {0.97, 0.03};
  auto r = partition_multimodal(ds, 10, contiguous_groups(10, w), 1);
  EXPECT_EQ(r.clients.size(), 10u);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_EQ(r.dropped, 50u);
}

TEST(Multimodal, InvalidPlansRejected) {
  auto ds = tagged_dataset(4, 5);
  std::vector<ClassGroup> overlap{{{0, 1}, 0.5}, {{1, 2}, 0.5}};
  EXPECT_THROW(partition_multimodal(ds, 4, overlap, 1), ConfigError);
  std::vector<ClassGroup> unnormalized{{{0, 1}, 0.5}, {{2, 3}, 0.6}};
  EXPECT_THROW(partition_multimodal(ds, 4, unnormalized, 1), ConfigError);
  std::vector<ClassGroup> out_of_range{{{0, 7}, 1.0}};
  EXPECT_THROW(partition_multimodal(ds, 4, out_of_range, 1), ConfigError);
}

TEST(LargestRemainder, MatchesHandRounding) {
  const double a[] = {0.5, 0.3, 0.2};
  EXPECT_EQ(largest_remainder(20, a), (std::vector<std::size_t>{10, 6, 4}));
  const double b[] = {1, 1, 1};
  EXPECT_EQ(largest_remainder(10, b), (std::vector<std::size_t>{4, 3, 3}));
  const double c[] = {0.34, 0.33, 0.33};
  auto s = largest_remainder(7, c);
  EXPECT_EQ(s[0] + s[1] + s[2], 7u);
  // 2.38, 2.31, 2.31 → floors 2,2,2 and the single extra seat to the largest remainder.
  EXPECT_EQ(s, (std::vector<std::size_t>{3, 2, 2}));
}

TEST(Iid, CompleteAndBalanced) {
  auto ds = tagged_dataset(5, 21);
  auto parts = partition_iid(ds, 4, 6);
  EXPECT_EQ(union_of(parts), items_of(ds));
  for (const auto& c : parts) EXPECT_TRUE(c.size() == 26 || c.size() == 27);
}

TEST(LocalSplit, EightyTwenty) {
  ClientDataset cd;
  cd.train = tagged_dataset(10, 10, false);
  auto s = local_split(cd, 0.2);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.test.size(), 20u);
  for (auto h : s.test.histogram()) EXPECT_EQ(h, 2u);
}

TEST(LocalSplit, SingleClassClient) {
  ClientDataset cd;
  cd.train = tagged_dataset(1, 100);
  cd.train.classes = 10;
  auto s = local_split(cd, 0.2);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.test.size(), 20u);
}

TEST(LocalSplit, PerClassWithinOneOfExactShare) {
  for (double frac : {0.1, 0.2, 0.33, 0.5}) {
    for (std::size_t per : {3u, 7u, 11u}) {
      ClientDataset cd;
      cd.train = tagged_dataset(6, per, false);
      // Unequal class sizes.
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < cd.train.size(); ++i)
        if (cd.train.labels[i] != 0 || i % 2) keep.push_back(i);
      cd.train = cd.train.subset(keep);
      const std::size_t n = cd.train.size();
      auto s = local_split(cd, frac);
      const auto total = cd.train.histogram();
      const auto test = s.test.histogram();
      const auto train = s.train.histogram();
      for (std::size_t k = 0; k < 6; ++k) {
        EXPECT_LE(std::abs(static_cast<double>(test[k]) - frac * static_cast<double>(total[k])), 1.0);
        EXPECT_EQ(test[k] + train[k], total[k]);
      }
      EXPECT_EQ(s.test.size(), static_cast<std::size_t>(std::llround(frac * static_cast<double>(n))));
      std::multiset<Item> merged = items_of(s.train);
      auto te = items_of(s.test);
      for (const auto& it : te) EXPECT_EQ(merged.count(it), 0u);
      merged.insert(te.begin(), te.end());
      EXPECT_EQ(merged, items_of(cd.train));
    }
  }
}

TEST(LocalSplit, SmallClientsKeepOneTestItem) {
  ClientDataset cd;
  cd.train = tagged_dataset(2, 1);
  auto s = local_split(cd, 0.1);
  EXPECT_EQ(s.test.size(), 1u);
  EXPECT_EQ(s.train.size(), 1u);
  EXPECT_THROW(local_split(cd, 0.0), ConfigError);
  EXPECT_THROW(local_split(cd, 1.0), ConfigError);
}

TEST(Partition, PlanSplitsEveryClient) {
  auto ds = tagged_dataset(10, 20);
  PartitionPlan plan;
  plan.clients = 10;
  plan.seed = 4;
  auto r = partition(ds, plan);
  ASSERT_EQ(r.clients.size(), 10u);
  for (const auto& c : r.clients) {
    EXPECT_EQ(c.test.size(), 4u);
    EXPECT_EQ(c.train.size(), 16u);
    std::size_t hsum = 0;
    for (auto h : c.histogram) hsum += h;
    EXPECT_EQ(hsum, c.size());
  }
  EXPECT_EQ(union_of(r.clients), items_of(ds));
  plan.test_fraction = 1.5;
  EXPECT_THROW(partition(ds, plan), ConfigError);
  EXPECT_EQ(parse_partition_mode("iid"), PartitionMode::iid);
  EXPECT_THROW(parse_partition_mode("dirichlet"), ConfigError);
}
