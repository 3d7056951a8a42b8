#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedzda/checkpoint.hpp"
#include "fedzda/config.hpp"
#include "fedzda/errors.hpp"
#include "fedzda/experiment.hpp"
#include "testing.hpp"

using namespace fedzda;
namespace fsys = std::filesystem;

namespace {

std::string slurp(const fsys::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

ExperimentConfig tiny_toy() {
  auto c = preset("desk-toy");
  c.federation.rounds = 3;
  c.federation.aug_start = 2;
  c.federation.method = Method::fed_zdac;
  c.federation.zsdg.iterations = 5;
  c.federation.zsdg.per_class = 2;
  c.dataset.toy_train_per_class = 40;
  c.dataset.toy_test_per_class = 10;
  c.seeds = {3};
  return c;
}

int run_cli(const std::string& args, const fsys::path& log) {
  const std::string cmd = std::string(FEDZDA_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Presets, FullMnistValues) {
  auto c = preset("full-mnist-unimodal");
  EXPECT_EQ(c.dataset.name, "mnist");
  EXPECT_EQ(c.arch, Architecture::mnist_cnn);
  EXPECT_EQ(c.federation.clients, 100u);
  EXPECT_EQ(c.partition.clients, 100u);
  EXPECT_EQ(c.federation.participation, 0.1);
  EXPECT_EQ(c.federation.local_epochs, 5u);
  EXPECT_EQ(c.federation.batch_size, 10u);
  EXPECT_EQ(c.federation.learning_rate, 0.02);
  EXPECT_EQ(c.federation.zsdg.iterations, 500u);
  EXPECT_EQ(c.partition.shards_per_client, 2u);
  EXPECT_EQ(c.partition.mode, PartitionMode::unimodal);
}

TEST(Presets, EveryPresetValidates) {
  for (const auto& n : preset_names()) EXPECT_NO_THROW(preset(n).validate(false)) << n;
  EXPECT_THROW(preset("nope"), ConfigError);
}

TEST(ConfigJson, RoundTripIsExact) {
  for (const auto& n : preset_names()) {
    auto j = config_to_json(preset(n));
    EXPECT_EQ(config_to_json(config_from_json(j)), j) << n;
  }
}

TEST(ConfigJson, OverridesApplyOverPreset) {
  nlohmann::json j = {{"preset", "desk-toy"}, {"federation", {{"rounds", 4}, {"method", "fed_zdas"}}}};
  auto c = config_from_json(j);
  EXPECT_EQ(c.federation.rounds, 4u);
  EXPECT_EQ(c.federation.method, Method::fed_zdas);
  EXPECT_EQ(c.federation.clients, 8u);
}

TEST(ConfigJson, UnknownKeysAndBadValuesRejected) {
  EXPECT_THROW(config_from_json({{"federation", {{"roundz", 3}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(config_from_json({{"federation", {{"participation", 0}}}}).validate(false), ConfigError);
  EXPECT_THROW(config_from_json({{"federation", {{"method", "scaffold"}}}}), ConfigError);
}

TEST(ConfigJson, ClientCountsMustAgree) {
  auto c = preset("desk-toy");
  c.partition.clients = 7;
  EXPECT_THROW(c.validate(false), ConfigError);
}

TEST(AugStarts, ParsesRoundsAndFractions) {
  EXPECT_EQ(parse_aug_starts("18,0.8T,29", 30), (std::vector<std::size_t>{18, 24, 29}));
  EXPECT_EQ(parse_aug_starts("0.6T,0.95T", 30), (std::vector<std::size_t>{18, 29}));
  EXPECT_EQ(parse_aug_starts("31", 30), (std::vector<std::size_t>{31}));
  EXPECT_THROW(parse_aug_starts("x", 30), ConfigError);
  EXPECT_THROW(parse_aug_starts("", 30), ConfigError);
}

TEST(NumberFormat, ShortestRoundTrip) {
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(90.0), "90");
  EXPECT_EQ(std::stod(format_number(1.0 / 3.0)), 1.0 / 3.0);
}

TEST(Outputs, RoundsCsvIsByteIdenticalOnRepeat) {
  const auto cfg = tiny_toy();
  const auto data = load_data(cfg);
  auto a = run_seed(cfg, data, 3), b = run_seed(cfg, data, 3);
  const auto da = fedzda::testing::temp_dir("out_a"), db = fedzda::testing::temp_dir("out_b");
  write_seed_outputs(da, a);
  write_seed_outputs(db, b);
  EXPECT_EQ(slurp(da / "rounds.csv"), slurp(db / "rounds.csv"));
  EXPECT_EQ(slurp(da / "summary.json"), slurp(db / "summary.json"));
  EXPECT_EQ(slurp(da / "final.ckpt"), slurp(db / "final.ckpt"));

  const auto csv = slurp(da / "rounds.csv");
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header,
            "round,method,seed,sampled,failed,train_loss,synthetic_count,zsdg_loss_mean,zsdg_loss_max,"
            "mean_local_acc,client_variance,external_acc,class_variance");
  std::size_t rows = 0;
  for (std::string l; std::getline(lines, l);) ++rows;
  EXPECT_EQ(rows, cfg.federation.rounds);
}

TEST(Outputs, SummaryMatchesPerClientAccuracies) {
  const auto cfg = tiny_toy();
  const auto data = load_data(cfg);
  auto run = run_seed(cfg, data, 3);
  const auto dir = fedzda::testing::temp_dir("summary");
  write_seed_outputs(dir, run);
  auto s = nlohmann::json::parse(slurp(dir / "summary.json"));
  const auto acc = s.at("per_client_accuracy").get<std::vector<double>>();
  const auto mv = percent_stats(acc);
  EXPECT_NEAR(s.at("final").at("mean_local_acc").get<double>(), mv.mean, 1e-9);
  EXPECT_NEAR(s.at("final").at("client_variance").get<double>(), mv.variance, 1e-9);
  const auto cls = s.at("per_class_accuracy").get<std::vector<double>>();
  EXPECT_NEAR(s.at("final").at("class_variance").get<double>(), percent_stats(cls).variance, 1e-9);
  const auto loaded = load_model<float>(dir / "final.ckpt");
  EXPECT_EQ(loaded.fingerprint(), run.state.global.fingerprint());
}

TEST(Outputs, CheckpointedRunResumesIdentically) {
  auto cfg = tiny_toy();
  cfg.checkpoint_every = 1;
  const auto data = load_data(cfg);
  const auto ckpt = fedzda::testing::temp_dir("resume");
  auto straight = run_seed(cfg, data, 3);
  auto partial_cfg = cfg;
  partial_cfg.federation.rounds = 2;
  (void)run_seed(partial_cfg, data, 3, ckpt);
  auto resumed = run_seed(cfg, data, 3, ckpt);
  EXPECT_EQ(resumed.state.global.fingerprint(), straight.state.global.fingerprint());
  EXPECT_EQ(rounds_csv(resumed.state.reports), rounds_csv(straight.state.reports));
}

TEST(Sweep, RowsPerStartAndSeedAndLateStartIsFedAvg) {
  auto cfg = tiny_toy();
  cfg.seeds = {1, 2};
  const auto data = load_data(cfg);
  const std::vector<std::size_t> starts{2, cfg.federation.rounds + 1};
  auto rows = sweep_aug_start(cfg, data, starts);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].aug_start, 2u);
  EXPECT_EQ(rows[1].seed, 2u);
  auto fed = cfg;
  fed.federation.method = Method::fedavg;
  for (std::size_t k = 0; k < 2; ++k) {
    auto base = run_seed(fed, data, cfg.seeds[k]);
    EXPECT_EQ(rows[2 + k].mean_local_acc, base.local.mean);
    EXPECT_EQ(rows[2 + k].client_variance, base.local.variance);
    EXPECT_EQ(rows[2 + k].class_variance, base.global.class_variance);
  }
  const auto csv = sweep_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Cli, PresetsListing) {
  const auto dir = fedzda::testing::temp_dir("cli_presets");
  ASSERT_EQ(run_cli("presets", dir / "log"), 0);
  const auto out = slurp(dir / "log");
  for (const auto& n : preset_names()) EXPECT_NE(out.find(n), std::string::npos) << n;
}

TEST(Cli, BadConfigExitsWithTwo) {
  const auto dir = fedzda::testing::temp_dir("cli_bad");
  std::ofstream(dir / "bad.json") << R"({"federation": {"roundz": 3}})";
  EXPECT_EQ(run_cli("run --config " + (dir / "bad.json").string(), dir / "log"), 2);
  EXPECT_NE(slurp(dir / "log").find("roundz"), std::string::npos);
}

TEST(Cli, ZsdgDumpWritesOnePngPerClass) {
  const auto dir = fedzda::testing::temp_dir("cli_dump");
  save_model(Model<float>::build(ArchitectureSpec::defaults(Architecture::toy_cnn), 1), dir / "m.ckpt");
  std::ofstream(dir / "cfg.json") << R"({"preset": "desk-toy", "zsdg": {"iterations": 3, "per_class": 4}})";
  ASSERT_EQ(run_cli("zsdg-dump --config " + (dir / "cfg.json").string() + " --out " + (dir / "png").string() + " " +
                        (dir / "m.ckpt").string(),
                    dir / "log"),
            0)
      << slurp(dir / "log");
  std::size_t pngs = 0;
  for (const auto& e : fsys::directory_iterator(dir / "png")) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 4u);
  EXPECT_TRUE(fsys::exists(dir / "png" / "manifest.json"));
  const auto head = slurp(dir / "png" / "class_0.png").substr(0, 8);
  EXPECT_EQ(head, std::string("\x89PNG\r\n\x1a\n", 8));
}
