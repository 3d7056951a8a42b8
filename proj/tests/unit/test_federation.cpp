#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "fedzda/errors.hpp"
#include "fedzda/federation.hpp"
#include "testing.hpp"

using namespace fedzda;

namespace {

ArchitectureSpec toy_spec() { return ArchitectureSpec::defaults(Architecture::toy_cnn); }

std::vector<ClientDataset> toy_clients(std::size_t clients = 8, std::uint64_t seed = 1) {
  PartitionPlan plan;
  plan.clients = clients;
  plan.shards_per_client = 1;
  plan.seed = seed;
  return partition(make_toy_dataset(4, 40, seed), plan).clients;
}

FedConfig toy_fed(Method m = Method::fedavg) {
  FedConfig c;
  c.rounds = 3;
  c.clients = 8;
  c.participation = 0.5;
  c.local_epochs = 1;
  c.batch_size = 10;
  c.learning_rate = 0.05;
  c.method = m;
  c.zsdg.iterations = 5;
  c.zsdg.per_class = 2;
  c.aug_start = 2;
  c.seed = 7;
  return c;
}

Model<double> randomized(std::uint64_t seed) {
  auto m = Model<double>::build(toy_spec(), seed);
  Rng rng(seed * 31 + 1);
  for (auto& s : m.bn_buffers()) {
    for (auto& v : s.mean.values()) v = rng.uniform() - 0.5;
    for (auto& v : s.var.values()) v = 0.5 + rng.uniform();
  }
  return m;
}

std::vector<double> flat_with_bn(const Model<double>& m) {
  auto f = m.flatten_parameters();
  for (const auto& s : m.bn_buffers()) {
    f.insert(f.end(), s.mean.values().begin(), s.mean.values().end());
    f.insert(f.end(), s.var.values().begin(), s.var.values().end());
  }
  return f;
}

}  // namespace

TEST(Sampling, FullParticipationAndHundredClients) {
  Rng rng(1);
  auto all = sample_clients(20, 1.0, rng);
  std::vector<std::size_t> want(20);
  std::iota(want.begin(), want.end(), std::size_t{0});
  EXPECT_EQ(all, want);
  EXPECT_EQ(sample_clients(100, 0.1, rng).size(), 10u);
  EXPECT_EQ(clients_per_round(20, 0.25), 5u);
  EXPECT_EQ(clients_per_round(10, 0.01), 1u);
  EXPECT_THROW(sample_clients(10, 0.0, rng), ConfigError);
  EXPECT_THROW(sample_clients(10, 1.5, rng), ConfigError);
}

TEST(Sampling, InclusionFrequencyWithinBinomialBound) {
  Rng rng(2);
  const std::size_t draws = 10000, Z = 100;
  std::vector<std::size_t> hits(Z, 0);
  for (std::size_t d = 0; d < draws; ++d) {
    auto s = sample_clients(Z, 0.1, rng);
    ASSERT_TRUE(std::is_sorted(s.begin(), s.end()));
    ASSERT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
    for (auto c : s) ++hits[c];
  }
  const double sigma = std::sqrt(0.1 * 0.9 / draws);
  for (auto h : hits) EXPECT_NEAR(static_cast<double>(h) / draws, 0.1, 3 * sigma + 1e-12);
}

TEST(Sampling, RoundScheduleIsDeterministic) {
  FedConfig c;
  c.seed = 11;
  for (std::size_t t = 1; t <= 5; ++t) EXPECT_EQ(sample_clients_for_round(c, t), sample_clients_for_round(c, t));
  EXPECT_NE(sample_clients_for_round(c, 1), sample_clients_for_round(c, 2));
}

TEST(LocalUpdate, ZeroLearningRateKeepsParameters) {
  auto clients = toy_clients();
  auto g = Model<double>::build(toy_spec(), 3);
  Rng rng(1);
  auto r = local_update(g, clients[0].train, LocalTrainConfig{2, 5, 0.0, 0.0}, rng);
  EXPECT_EQ(r.model.flatten_parameters(), g.flatten_parameters());
  EXPECT_NE(r.model.bn_buffers()[0].mean.values(), g.bn_buffers()[0].mean.values());
  EXPECT_EQ(r.steps, 2 * ((clients[0].train.size() + 4) / 5));
}

TEST(LocalUpdate, SingleBatchMatchesHandStep) {
  auto clients = toy_clients();
  const Dataset& data = clients[1].train;
  auto g = Model<double>::build(toy_spec(), 4);
  const double lr = 0.1;
  Rng rng(5);
  auto r = local_update(g, data, LocalTrainConfig{1, data.size(), lr, 0.0}, rng);
  EXPECT_EQ(r.steps, 1u);

  auto oracle = g;
  oracle.set_requires_grad(true);
  Tape<double> tape;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto loss = ops::softmax_xent(oracle.forward_train(tape, tape.constant(data.batch<double>(idx))),
                                std::span<const int>(data.labels));
  EXPECT_NEAR(r.mean_loss, loss.value()[0], 1e-12);
  tape.backward(loss);
  for (std::size_t p = 0; p < oracle.parameters().size(); ++p) {
    const auto& w0 = g.parameters()[p];
    const auto& grad = oracle.parameters()[p].grad();
    const auto& w1 = r.model.parameters()[p];
    for (std::size_t i = 0; i < w0.size(); ++i) ASSERT_NEAR(w1[i], w0[i] - lr * grad[i], 1e-12);
  }
  for (std::size_t l = 0; l < g.bn_layer_count(); ++l)
    for (std::size_t c = 0; c < oracle.bn_buffers()[l].mean.size(); ++c)
      EXPECT_NEAR(r.model.bn_buffers()[l].mean[c], oracle.bn_buffers()[l].mean[c], 1e-12);
}

TEST(LocalUpdate, ProximalTermShrinksDrift) {
  auto clients = toy_clients();
  auto g = Model<double>::build(toy_spec(), 6);
  const auto w0 = g.flatten_parameters();
  double prev = 1e300;
  for (double mu : {0.0, 0.1, 1.0, 10.0}) {
    Rng rng(9);
    auto r = local_update(g, clients[2].train, LocalTrainConfig{3, 5, 0.05, mu}, rng);
    auto w = r.model.flatten_parameters();
    double d = 0;
    for (std::size_t i = 0; i < w.size(); ++i) d += (w[i] - w0[i]) * (w[i] - w0[i]);
    EXPECT_LT(std::sqrt(d), prev) << "mu " << mu;
    prev = std::sqrt(d);
  }
}

TEST(LocalUpdate, EmptyDataAndNonFiniteInputs) {
  auto g = Model<double>::build(toy_spec(), 1);
  Rng rng(1);
  Dataset empty = make_toy_dataset(4, 1, 1).like();
  EXPECT_THROW(local_update(g, empty, LocalTrainConfig{}, rng), ConfigError);
  auto bad = make_toy_dataset(4, 2, 1);
  bad.images[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(local_update(g, bad, LocalTrainConfig{1, 8, 0.1, 0.0}, rng), NumericError);
}

TEST(Aggregate, IdempotentOnReplicas) {
  auto m = randomized(1);
  std::vector<Model<double>> reps(4, m);
  const std::vector<double> w{0.1, 0.2, 0.3, 0.4};
  auto a = aggregate(reps, w);
  EXPECT_EQ(a.fingerprint(), m.fingerprint());
  auto mf = convert_model<float>(m);
  std::vector<Model<float>> repf(3, mf);
  const std::vector<double> u{1.0 / 3, 1.0 / 3, 1.0 / 3};
  EXPECT_EQ(aggregate(repf, u).fingerprint(), mf.fingerprint());
}

TEST(Aggregate, DegenerateWeightsPickFirst) {
  std::vector<Model<double>> ms{randomized(1), randomized(2)};
  const std::vector<double> w{1.0, 0.0};
  EXPECT_EQ(aggregate(ms, w).fingerprint(), ms[0].fingerprint());
}

TEST(Aggregate, MatchesFlatVectorMean) {
  std::vector<Model<double>> ms;
  for (std::uint64_t s = 1; s <= 5; ++s) ms.push_back(randomized(s));
  for (const std::vector<double>& w : {std::vector<double>(5, 0.2), std::vector<double>{0.05, 0.3, 0.15, 0.4, 0.1}}) {
    auto a = flat_with_bn(aggregate(ms, w));
    std::vector<long double> oracle(a.size(), 0);
    for (std::size_t i = 0; i < ms.size(); ++i) {
      auto f = flat_with_bn(ms[i]);
      for (std::size_t e = 0; e < f.size(); ++e) oracle[e] += w[i] * static_cast<long double>(f[e]);
    }
    for (std::size_t e = 0; e < a.size(); ++e) ASSERT_NEAR(a[e], static_cast<double>(oracle[e]), 1e-12) << e;
  }
}

TEST(Aggregate, PermutationInvariant) {
  std::vector<Model<double>> ms{randomized(1), randomized(2), randomized(3)};
  const std::vector<double> w{0.2, 0.5, 0.3};
  std::vector<Model<double>> perm{ms[2], ms[0], ms[1]};
  const std::vector<double> pw{0.3, 0.2, 0.5};
  auto a = flat_with_bn(aggregate(ms, w)), b = flat_with_bn(aggregate(perm, pw));
  for (std::size_t e = 0; e < a.size(); ++e) ASSERT_NEAR(a[e], b[e], 1e-14);
}

TEST(Aggregate, RejectsBadInputs) {
  std::vector<Model<double>> ms{randomized(1), randomized(2)};
  EXPECT_THROW(aggregate(ms, std::vector<double>{0.5}), ConfigError);
  EXPECT_THROW(aggregate(ms, std::vector<double>{0.7, 0.7}), ConfigError);
  EXPECT_THROW(aggregate(ms, std::vector<double>{1.5, -0.5}), ConfigError);
  ms.push_back(Model<double>::build(ArchitectureSpec::defaults(Architecture::mnist_cnn), 1));
  EXPECT_THROW(aggregate(ms, std::vector<double>{0.4, 0.3, 0.3}), ConfigError);
  EXPECT_THROW(aggregate(std::vector<Model<double>>{}, std::vector<double>{}), ConfigError);
}

TEST(Federation, SingleClientRoundEqualsItsUpdate) {
  auto clients = toy_clients(1);
  auto cfg = toy_fed();
  cfg.clients = 1;
  cfg.participation = 1.0;
  cfg.rounds = 1;
  auto init = Model<float>::build(toy_spec(), 2);
  auto s = run_federation(cfg, clients, init);
  Rng rng(derive_seed(cfg.seed, Stream::local_train, {1, 0}));
  auto u = local_update(init, clients[0].train, LocalTrainConfig{1, 10, 0.05, 0.0}, rng);
  EXPECT_EQ(s.global.fingerprint(), u.model.fingerprint());
}

TEST(Federation, OneReportPerRound) {
  auto clients = toy_clients();
  auto cfg = toy_fed();
  std::size_t calls = 0;
  auto s = run_federation<float>(cfg, clients, Model<float>::build(toy_spec(), 1),
                                 [&](const RoundState<float>& st, RoundReport& r) {
                                   ++calls;
                                   EXPECT_EQ(st.round, r.round);
                                 });
  ASSERT_EQ(s.reports.size(), 3u);
  EXPECT_EQ(calls, 3u);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(s.reports[t].round, t + 1);
    EXPECT_EQ(s.reports[t].sampled, sample_clients_for_round(cfg, t + 1));
    EXPECT_TRUE(s.reports[t].failed.empty());
    EXPECT_GT(s.reports[t].train_loss, 0);
  }
}

TEST(Federation, ThreadCountDoesNotChangeResults) {
  auto clients = toy_clients();
  for (auto m : {Method::fedavg, Method::fed_zdac}) {
    auto cfg = toy_fed(m);
    auto init = Model<float>::build(toy_spec(), 1);
    auto serial = run_federation(cfg, clients, init);
    cfg.threads = 3;
    auto parallel = run_federation(cfg, clients, init);
    EXPECT_EQ(serial.global.fingerprint(), parallel.global.fingerprint()) << to_string(m);
  }
}

TEST(Federation, DegenerateProtocolsMatchFedAvgBitForBit) {
  auto clients = toy_clients();
  auto init = Model<float>::build(toy_spec(), 3);
  auto base = run_federation(toy_fed(), clients, init);

  auto late = toy_fed(Method::fed_zdac);
  late.aug_start = late.rounds + 1;
  auto no_quota = toy_fed(Method::fed_zdac);
  no_quota.zsdg.per_class = 0;
  auto no_server = toy_fed(Method::fed_zdas);
  no_server.server_epochs = 0;
  auto no_prox = toy_fed(Method::fedprox);
  no_prox.prox_mu = 0;
  for (const auto& cfg : {late, no_quota, no_server, no_prox}) {
    auto s = run_federation(cfg, clients, init);
    EXPECT_EQ(s.global.fingerprint(), base.global.fingerprint()) << to_string(cfg.method);
    for (std::size_t t = 0; t < s.reports.size(); ++t) {
      EXPECT_EQ(s.reports[t].train_loss, base.reports[t].train_loss);
      EXPECT_EQ(s.reports[t].synthetic_count, 0u);
    }
  }
}

TEST(Federation, ZdacAugmentsFromStartRound) {
  auto clients = toy_clients();
  auto cfg = toy_fed(Method::fed_zdac);
  auto s = run_fed_zdac(cfg, clients, Model<float>::build(toy_spec(), 1));
  const std::size_t per_client = cfg.zsdg.per_class * 4;
  EXPECT_EQ(s.reports[0].synthetic_count, 0u);
  EXPECT_EQ(s.reports[1].synthetic_count, s.reports[1].sampled.size() * per_client);
  EXPECT_GT(s.reports[1].zsdg_loss_mean, 0);
  EXPECT_GE(s.reports[1].zsdg_loss_max, s.reports[1].zsdg_loss_mean);
  EXPECT_THROW(run_fed_zdac(toy_fed(), clients, Model<float>::build(toy_spec(), 1)), ConfigError);
}

TEST(Federation, ZdasFakeUnionSize) {
  auto clients = toy_clients();
  auto cfg = toy_fed(Method::fed_zdas);
  auto s = run_fed_zdas(cfg, clients, Model<float>::build(toy_spec(), 1));
  for (const auto& r : s.reports) EXPECT_EQ(r.synthetic_count, r.sampled.size() * 4 * cfg.zsdg.per_class);
  auto fedavg = run_federation(toy_fed(), clients, Model<float>::build(toy_spec(), 1));
  EXPECT_NE(s.global.fingerprint(), fedavg.global.fingerprint());
}

TEST(Federation, ZdasServerStepKeepsAggregatedRunningStats) {
  auto clients = toy_clients();
  auto cfg = toy_fed(Method::fed_zdas);
  cfg.rounds = 1;
  auto base = toy_fed();
  base.rounds = 1;
  const auto init = Model<float>::build(toy_spec(), 1);
  auto zdas = run_fed_zdas(cfg, clients, init);
  auto fedavg = run_federation(base, clients, init);
  EXPECT_NE(zdas.global.parameters()[0].values(), fedavg.global.parameters()[0].values());
  const auto a = zdas.global.bn_stats(), b = fedavg.global.bn_stats();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t l = 0; l < a.size(); ++l) {
    EXPECT_EQ(a[l].mean.values(), b[l].mean.values());
    EXPECT_EQ(a[l].var.values(), b[l].var.values());
  }
  EXPECT_EQ(zdas.global.bn_momentum(), fedavg.global.bn_momentum());
}

TEST(Federation, FailedClientIsExcluded) {
  auto clients = toy_clients();
  auto cfg = toy_fed();
  cfg.rounds = 1;
  const auto sampled = sample_clients_for_round(cfg, 1);
  auto broken = clients;
  broken[sampled[0]].train.images[0] = std::numeric_limits<float>::quiet_NaN();
  auto init = Model<float>::build(toy_spec(), 5);
  auto s = run_federation(cfg, broken, init);
  ASSERT_EQ(s.reports[0].failed, std::vector<std::size_t>{sampled[0]});
  ASSERT_EQ(s.reports[0].failures.size(), 1u);
  // Oracle: aggregate of the remaining clients with renormalized weights.
  std::vector<Model<float>> ok;
  for (std::size_t k = 1; k < sampled.size(); ++k) {
    Rng rng(derive_seed(cfg.seed, Stream::local_train, {1, sampled[k]}));
    ok.push_back(local_update(init, clients[sampled[k]].train, LocalTrainConfig{1, 10, 0.05, 0.0}, rng).model);
  }
  std::vector<double> w(ok.size(), 1.0 / static_cast<double>(ok.size()));
  EXPECT_EQ(s.global.fingerprint(), aggregate(ok, w).fingerprint());
}

TEST(Federation, AllClientsFailingKeepsGlobal) {
  auto clients = toy_clients();
  for (auto& c : clients) c.train.images[0] = std::numeric_limits<float>::quiet_NaN();
  auto cfg = toy_fed();
  cfg.rounds = 1;
  auto init = Model<float>::build(toy_spec(), 5);
  auto s = run_federation(cfg, clients, init);
  EXPECT_EQ(s.global.fingerprint(), init.fingerprint());
  EXPECT_EQ(s.reports[0].failed.size(), s.reports[0].sampled.size());
}

TEST(Federation, CheckpointResumeIsBitIdentical) {
  auto clients = toy_clients();
  auto cfg = toy_fed(Method::fed_zdac);
  cfg.rounds = 4;
  auto init = Model<float>::build(toy_spec(), 8);
  auto full = run_federation(cfg, clients, init);

  auto part_cfg = cfg;
  part_cfg.rounds = 2;
  auto half = run_federation(part_cfg, clients, init);
  auto dir = fedzda::testing::temp_dir("fed_ckpt");
  save_round_checkpoint(dir, half, cfg);
  auto restored = load_round_checkpoint<float>(dir, cfg);
  EXPECT_EQ(restored.round, 2u);
  EXPECT_EQ(restored.reports.size(), 2u);
  auto resumed = run_federation(cfg, clients, std::move(restored));
  EXPECT_EQ(resumed.global.fingerprint(), full.global.fingerprint());
  ASSERT_EQ(resumed.reports.size(), full.reports.size());
  for (std::size_t t = 0; t < full.reports.size(); ++t) {
    EXPECT_EQ(resumed.reports[t].train_loss, full.reports[t].train_loss);
    EXPECT_EQ(resumed.reports[t].sampled, full.reports[t].sampled);
  }
  auto other = cfg;
  other.seed = 99;
  EXPECT_THROW(load_round_checkpoint<float>(dir, other), ConfigError);
}

TEST(FedConfig, Validation) {
  FedConfig c;
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.participation = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.rounds = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.prox_mu = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.aug_start = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_EQ(parse_method("fed_zdas"), Method::fed_zdas);
  EXPECT_THROW(parse_method("scaffold"), ConfigError);
  EXPECT_EQ(parse_client_weighting("data_size"), ClientWeighting::data_size);
}
