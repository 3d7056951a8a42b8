// Command-line front end: run, sweep-aug-start, zsdg-dump, audit,
// eval-oracle, quality-study, presets.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "fedzda/checkpoint.hpp"
#include "fedzda/config.hpp"
#include "fedzda/dpaudit.hpp"
#include "fedzda/errors.hpp"
#include "fedzda/experiment.hpp"
#include "fedzda/image_dump.hpp"
#include "fedzda/metrics.hpp"
#include "fedzda/simd/kernels.hpp"

namespace fs = std::filesystem;
using namespace fedzda;

namespace {

struct CommonOptions {
  std::string config;
  std::string preset;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::size_t threads = 0;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
  app->add_option("--preset", o.preset, "named preset (used when --config is absent or has no preset)");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--seed", o.seeds, "seed override (repeatable)");
  app->add_option("--threads", o.threads, "worker threads");
}

ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig cfg;
  if (!o.config.empty()) {
    std::ifstream f(o.config, std::ios::binary);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: " + o.config + ": " + e.what());
    }
    if (!o.preset.empty() && !j.contains("preset")) j["preset"] = o.preset;
    cfg = config_from_json(j);
  } else {
    cfg = preset(o.preset.empty() ? "desk-mnist-unimodal" : o.preset);
  }
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (o.threads > 0) cfg.threads = o.threads;
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream(path, std::ios::binary) << j.dump(1) << '\n';
}

nlohmann::json oracle_json(const OracleReport& r) {
  return {{"oracle_test_accuracy", r.oracle_test_accuracy},
          {"oracle_per_class", r.oracle_per_class},
          {"generator_per_class", r.generator_per_class},
          {"oracle_mean", r.oracle_mean},
          {"generator_mean", r.generator_mean}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with zero-shot data augmentation"};
  app.require_subcommand(1);
  std::string simd;
  app.add_option("--simd", simd, "kernel backend: scalar or avx2");

  CommonOptions run_o, sweep_o, dump_o, audit_o, oracle_o, quality_o;
  auto* run = app.add_subcommand("run", "run every seed of an experiment");
  add_common(run, run_o);

  auto* sweep = app.add_subcommand("sweep-aug-start", "fed_zdac over several augmentation start rounds");
  add_common(sweep, sweep_o);
  std::string starts = "0.6T,0.8T,0.95T";
  sweep->add_option("--starts", starts, "comma list of rounds; a trailing T scales by the round count");

  auto* dump = app.add_subcommand("zsdg-dump", "invert a checkpoint and write PNG grids");
  add_common(dump, dump_o);
  std::string model_path;
  dump->add_option("model", model_path, "model checkpoint")->required()->check(CLI::ExistingFile);

  auto* audit = app.add_subcommand("audit", "empirical total-variation audit on toy clients");
  add_common(audit, audit_o);

  auto* oracle = app.add_subcommand("eval-oracle", "grade synthetic samples with a centrally trained oracle");
  add_common(oracle, oracle_o);
  std::string oracle_model;
  oracle->add_option("--model", oracle_model, "generating model checkpoint (default: train fedavg per config)")
      ->check(CLI::ExistingFile);

  auto* quality = app.add_subcommand("quality-study", "centralized vs federated iid vs non-iid");
  add_common(quality, quality_o);

  auto* presets = app.add_subcommand("presets", "print preset names, or one resolved preset");
  std::string preset_name;
  presets->add_option("name", preset_name);

  CLI11_PARSE(app, argc, argv);

  try {
    if (simd == "scalar") simd::set_backend(simd::Backend::scalar);
    else if (simd == "avx2") simd::set_backend(simd::Backend::avx2);
    else if (!simd.empty()) throw ConfigError("--simd: expected scalar or avx2");

    if (*presets) {
      if (preset_name.empty())
        for (const auto& n : preset_names()) std::cout << n << '\n';
      else
        std::cout << config_to_json(preset(preset_name)).dump(1) << '\n';
      return 0;
    }

    if (*run) {
      const auto cfg = resolve(run_o);
      return run_experiment(cfg, std::cout);
    }

    if (*sweep) {
      auto cfg = resolve(sweep_o);
      cfg.validate(true);
      const auto data = load_data(cfg);
      const auto list = parse_aug_starts(starts, cfg.federation.rounds);
      const auto rows = sweep_aug_start(cfg, data, list);
      fs::create_directories(cfg.output_dir);
      std::ofstream(fs::path(cfg.output_dir) / "sweep.csv", std::ios::binary) << sweep_csv(rows);
      write_json(fs::path(cfg.output_dir) / "config.resolved.json", config_to_json(cfg));
      std::cout << sweep_csv(rows);
      return 0;
    }

    if (*dump) {
      auto cfg = resolve(dump_o);
      const auto model = load_model<float>(model_path);
      const auto batch = generate(model, cfg.federation.zsdg, cfg.seeds.front());
      const fs::path dir = dump_o.out.empty() ? fs::path(cfg.output_dir) / "zsdg" : fs::path(dump_o.out);
      const auto files = dump_synthetic(dir, batch);
      std::cout << "wrote " << files.size() << " grids to " << dir.string() << '\n';
      return 0;
    }

    if (*audit) {
      auto cfg = resolve(audit_o);
      if (cfg.dataset.name != "toy") {
        cfg.dataset.name = "toy";
        cfg.arch = Architecture::toy_cnn;
      }
      cfg.validate(false);
      const auto sets = audit_client_sets(cfg);
      const auto rep = audit_chain(sets.a, sets.b, audit_config(cfg));
      write_json(fs::path(cfg.output_dir) / "audit.json", rep.to_json());
      std::cout << "delta_data " << format_number(rep.data.tv) << ", delta_model " << format_number(rep.model.debiased)
                << ", delta_agg " << format_number(rep.agg.debiased) << ": " << rep.verdict << '\n';
      return rep.pass ? 0 : 1;
    }

    if (*oracle) {
      auto cfg = resolve(oracle_o);
      cfg.validate(true);
      const auto data = load_data(cfg);
      const auto spec = arch_spec(cfg, data.train);
      const auto seed = cfg.seeds.front();
      const auto oracle_model_trained = train_oracle<float>(data.train, spec, cfg.oracle.train, seed);
      Model<float> gen;
      if (!oracle_model.empty()) gen = load_model<float>(oracle_model);
      else gen = run_seed(cfg, data, seed).state.global;
      ZsdgConfig z = cfg.federation.zsdg;
      z.per_class = cfg.oracle.per_class;
      const auto batch = generate(gen, z, derive_seed(seed, Stream::zsdg_server, {0}));
      auto rep = eval_synthetic(oracle_model_trained, gen, batch);
      rep.oracle_test_accuracy = global_test(oracle_model_trained, data.test).accuracy;
      write_json(fs::path(cfg.output_dir) / "oracle_report.json", oracle_json(rep));
      dump_synthetic(fs::path(cfg.output_dir) / "oracle_samples", batch);
      std::cout << "oracle test accuracy " << format_number(rep.oracle_test_accuracy) << "%, oracle on synthetic "
                << format_number(100 * rep.oracle_mean) << "%, generator on synthetic "
                << format_number(100 * rep.generator_mean) << "%\n";
      return 0;
    }

    if (*quality) {
      auto cfg = resolve(quality_o);
      cfg.validate(true);
      const auto data = load_data(cfg);
      nlohmann::json out = nlohmann::json::array();
      int status = 0;
      for (auto seed : cfg.seeds) {
        QualityStudyConfig q;
        q.arch = arch_spec(cfg, data.train);
        q.fed = cfg.federation;
        q.non_iid = cfg.partition;
        q.zsdg = cfg.federation.zsdg;
        q.seed = seed;
        const auto rep = model_quality_study(q, data.train, data.test);
        nlohmann::json regimes = nlohmann::json::array();
        for (std::size_t i = 0; i < rep.regimes.size(); ++i) {
          const auto& r = rep.regimes[i];
          regimes.push_back({{"name", r.name},
                             {"test_accuracy", r.test_accuracy},
                             {"zsdg_initial_loss", r.zsdg_initial_loss},
                             {"zsdg_final_loss", r.zsdg_final_loss}});
          dump_synthetic(fs::path(cfg.output_dir) / ("seed-" + std::to_string(seed)) / r.name, rep.samples[i]);
          std::cout << "seed " << seed << ' ' << r.name << ": " << format_number(r.test_accuracy) << "%\n";
        }
        out.push_back({{"seed", seed}, {"ordered", rep.ordered()}, {"regimes", regimes}});
      }
      write_json(fs::path(cfg.output_dir) / "quality_study.json", out);
      return status;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
