#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fedzda/errors.hpp"
#include "fedzda/metrics.hpp"
#include "fedzda/rng.hpp"

using namespace fedzda;

namespace {

ArchitectureSpec toy_spec() { return ArchitectureSpec::defaults(Architecture::toy_cnn); }

}  // namespace

TEST(PercentStats, KnownValues) {
  const std::vector<double> same{0.9, 0.9, 0.9};
  auto a = percent_stats(same);
  EXPECT_NEAR(a.mean, 90.0, 1e-12);
  EXPECT_NEAR(a.variance, 0.0, 1e-12);
  const std::vector<double> spread{0.8, 0.9, 1.0};
  auto b = percent_stats(spread);
  EXPECT_NEAR(b.mean, 90.0, 1e-12);
  EXPECT_NEAR(b.variance, 200.0 / 3.0, 1e-9);
  EXPECT_EQ(percent_stats(std::vector<double>{}).mean, 0.0);
}

TEST(PercentStats, MatchesDirectFormula) {
  Rng rng(3);
  std::vector<double> f(37);
  for (auto& v : f) v = rng.uniform();
  long double m = 0, v = 0;
  for (double x : f) m += 100.0L * x;
  m /= f.size();
  for (double x : f) v += (100.0L * x - m) * (100.0L * x - m);
  v /= f.size();
  auto s = percent_stats(f);
  EXPECT_NEAR(s.mean, static_cast<double>(m), 1e-10);
  EXPECT_NEAR(s.variance, static_cast<double>(v), 1e-8);
}

TEST(GlobalTest, ConfusionMatchesCounts) {
  const std::vector<int> labels{0, 0, 1, 1, 1, 2};
  const std::vector<int> pred{0, 1, 1, 1, 2, 2};
  auto g = global_test_from_predictions(labels, pred, 3);
  EXPECT_EQ(g.confusion, (std::vector<std::vector<std::size_t>>{{1, 1, 0}, {0, 2, 1}, {0, 0, 1}}));
  EXPECT_NEAR(g.accuracy, 400.0 / 6.0, 1e-12);
  EXPECT_NEAR(g.per_class[0], 0.5, 1e-15);
  EXPECT_NEAR(g.per_class[1], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(g.per_class[2], 1.0, 1e-15);
  auto mv = percent_stats(g.per_class);
  EXPECT_EQ(g.class_mean, mv.mean);
  EXPECT_EQ(g.class_variance, mv.variance);
}

TEST(GlobalTest, MissingClassAndMismatchRejected) {
  const std::vector<int> labels{0, 0, 1};
  EXPECT_THROW(global_test_from_predictions(labels, labels, 3), ConfigError);
  EXPECT_THROW(global_test_from_predictions(labels, std::vector<int>{0}, 2), DimensionError);
  EXPECT_THROW(global_test_from_predictions(labels, std::vector<int>{0, 5, 1}, 2), ConfigError);
}

TEST(GlobalTest, RandomPredictorSitsAtChance) {
  Rng rng(5);
  const std::size_t n = 20000, classes = 10;
  std::vector<int> labels(n), pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % classes);
    pred[i] = static_cast<int>(rng.below(classes));
  }
  auto g = global_test_from_predictions(labels, pred, classes);
  const double sigma = 100.0 * std::sqrt(0.1 * 0.9 / n);
  EXPECT_NEAR(g.accuracy, 10.0, 4 * sigma);
}

TEST(GlobalTest, ModelPathAgreesWithPredictions) {
  auto ds = make_toy_dataset(4, 10, 2);
  auto m = Model<double>::build(toy_spec(), 3);
  auto g = global_test(m, ds);
  auto h = global_test_from_predictions(ds.labels, m.classify(ds.all_images<double>()), 4);
  EXPECT_EQ(g.confusion, h.confusion);
  EXPECT_NEAR(g.accuracy, 100.0 * accuracy(m, ds), 1e-12);
  auto other = make_toy_dataset(3, 4, 2);
  EXPECT_THROW(global_test(m, other), ConfigError);
}

TEST(LocalTest, SkipsEmptySplitsWithWarning) {
  auto ds = make_toy_dataset(4, 10, 1);
  auto m = Model<double>::build(toy_spec(), 1);
  std::vector<ClientDataset> clients(3);
  for (std::size_t c = 0; c < 3; ++c) {
    clients[c].id = c;
    clients[c].train = ds;
    std::vector<std::size_t> idx;
    for (std::size_t i = c; i < ds.size(); i += 3) idx.push_back(i);
    clients[c].test = ds.subset(idx);
  }
  clients[1].test = ds.like();
  auto s = local_test(m, clients);
  EXPECT_EQ(s.client_ids, (std::vector<std::size_t>{0, 2}));
  ASSERT_EQ(s.warnings.size(), 1u);
  const std::vector<double> acc{accuracy(m, clients[0].test), accuracy(m, clients[2].test)};
  EXPECT_EQ(s.accuracy, acc);
  EXPECT_NEAR(s.mean, percent_stats(acc).mean, 1e-12);
  EXPECT_NEAR(s.variance, percent_stats(acc).variance, 1e-12);
}

TEST(Oracle, ZeroEpochsIsTheInitialModel) {
  auto ds = make_toy_dataset(4, 10, 1);
  auto m = train_oracle<float>(ds, toy_spec(), TrainConfig{0, 10, 0.05}, 4);
  EXPECT_EQ(m.fingerprint(), Model<float>::build(toy_spec(), derive_seed(4, Stream::init)).fingerprint());
}

TEST(Oracle, DeterministicAndLearnsToySet) {
  auto train = make_toy_dataset(4, 100, 1);
  auto test = make_toy_dataset(4, 50, 2);
  auto a = train_oracle<float>(train, toy_spec(), TrainConfig{5, 10, 0.05}, 3);
  auto b = train_oracle<float>(train, toy_spec(), TrainConfig{5, 10, 0.05}, 3);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_GE(accuracy(a, test), 0.95);
}

TEST(EvalSynthetic, RelabeledByGeneratorScoresOne) {
  auto train = make_toy_dataset(4, 50, 1);
  auto m = train_oracle<float>(train, toy_spec(), TrainConfig{2, 10, 0.05}, 1);
  ZsdgConfig zc;
  zc.iterations = 0;
  zc.per_class = 8;
  auto batch = generate(m, zc, 11);
  batch.labels = m.classify(batch.images);
  auto r = eval_synthetic(m, m, batch);
  for (std::size_t c = 0; c < 4; ++c) {
    bool present = false;
    for (int l : batch.labels) present |= l == static_cast<int>(c);
    EXPECT_EQ(r.generator_per_class[c], present ? 1.0 : 0.0);
  }
  EXPECT_EQ(r.oracle_per_class, r.generator_per_class);
}

TEST(EvalSynthetic, ShapeMismatchRejected) {
  auto toy = Model<float>::build(toy_spec(), 1);
  auto mnist = Model<float>::build(ArchitectureSpec::defaults(Architecture::mnist_cnn), 1);
  ZsdgConfig zc;
  zc.iterations = 0;
  zc.per_class = 2;
  auto batch = generate(toy, zc, 1);
  EXPECT_THROW(eval_synthetic(mnist, toy, batch), ConfigError);
  auto spec3 = toy_spec();
  spec3.classes = 3;
  EXPECT_THROW(eval_synthetic(Model<float>::build(spec3, 1), toy, batch), ConfigError);
}

TEST(QualityStudy, DeterministicThreeRegimes) {
  QualityStudyConfig cfg;
  cfg.arch = toy_spec();
  cfg.fed.rounds = 2;
  cfg.fed.clients = 4;
  cfg.fed.participation = 1.0;
  cfg.fed.local_epochs = 1;
  cfg.fed.batch_size = 10;
  cfg.fed.learning_rate = 0.05;
  cfg.non_iid.shards_per_client = 1;
  cfg.zsdg.iterations = 5;
  cfg.zsdg.per_class = 2;
  cfg.seed = 3;
  auto train = make_toy_dataset(4, 40, 1);
  auto test = make_toy_dataset(4, 20, 2);
  auto a = model_quality_study(cfg, train, test);
  auto b = model_quality_study(cfg, train, test);
  ASSERT_EQ(a.regimes.size(), 3u);
  EXPECT_EQ(a.regimes[0].name, "centralized");
  EXPECT_EQ(a.regimes[1].name, "federated_iid");
  EXPECT_EQ(a.regimes[2].name, "federated_non_iid");
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.regimes[i].test_accuracy, b.regimes[i].test_accuracy);
    EXPECT_EQ(a.regimes[i].zsdg_final_loss, b.regimes[i].zsdg_final_loss);
    EXPECT_EQ(a.samples[i].size(), 8u);
  }
  QualityStudyReport r;
  r.regimes = {{"a", 90, 0, 0}, {"b", 80, 0, 0}, {"c", 80, 0, 0}};
  EXPECT_TRUE(r.ordered());
  r.regimes[2].test_accuracy = 81;
  EXPECT_FALSE(r.ordered());
}
