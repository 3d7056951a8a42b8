#include "fedzda/experiment.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "fedzda/checkpoint.hpp"
#include "fedzda/errors.hpp"

namespace fedzda {

namespace fs = std::filesystem;

std::string format_number(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

fs::path find_file(const fs::path& dir, const std::string& name) {
  if (fs::exists(dir / name)) return dir / name;
  if (fs::exists(dir / (name + ".gz"))) return dir / (name + ".gz");
  throw ConfigError("dataset.path: neither " + name + " nor " + name + ".gz found in " + dir.string());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw ParseError(ParseError::Kind::io, "cannot write " + path.string());
}

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
    });
  for (auto& th : pool) th.join();
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

LoadedData load_data(const ExperimentConfig& cfg) {
  LoadedData d;
  const auto& ds = cfg.dataset;
  if (ds.name == "toy") {
    d.train = make_toy_dataset(ds.toy_classes, ds.toy_train_per_class, 1, 1, 8, 8, ds.toy_noise);
    d.test = make_toy_dataset(ds.toy_classes, ds.toy_test_per_class, 2, 1, 8, 8, ds.toy_noise);
  } else if (ds.name == "cifar10") {
    d.train = load_cifar10(ds.resolved_path(), CifarSplit::train);
    d.test = load_cifar10(ds.resolved_path(), CifarSplit::test);
  } else {
    const fs::path dir = ds.resolved_path();
    d.train = load_idx(find_file(dir, "train-images-idx3-ubyte"), find_file(dir, "train-labels-idx1-ubyte"));
    d.test = load_idx(find_file(dir, "t10k-images-idx3-ubyte"), find_file(dir, "t10k-labels-idx1-ubyte"));
  }
  if (ds.train_limit > 0 && ds.train_limit < d.train.size()) {
    std::vector<std::size_t> idx(ds.train_limit);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    d.train = d.train.subset(idx);
  }
  return d;
}

ArchitectureSpec arch_spec(const ExperimentConfig& cfg, const Dataset& ds) {
  ArchitectureSpec s{cfg.arch, ds.channels, ds.height, ds.width, ds.classes};
  s.validate();
  return s;
}

std::string rounds_csv(const std::vector<RoundReport>& reports) {
  std::string out =
      "round,method,seed,sampled,failed,train_loss,synthetic_count,zsdg_loss_mean,zsdg_loss_max,"
      "mean_local_acc,client_variance,external_acc,class_variance\n";
  for (const auto& r : reports) {
    out += std::to_string(r.round) + ',' + to_string(r.method) + ',' + std::to_string(r.seed) + ',' + join(r.sampled) +
           ',' + join(r.failed) + ',' + format_number(r.train_loss) + ',' + std::to_string(r.synthetic_count) + ',' +
           format_number(r.zsdg_loss_mean) + ',' + format_number(r.zsdg_loss_max) + ',';
    if (r.evaluated)
      out += format_number(r.mean_local_acc) + ',' + format_number(r.client_variance) + ',' +
             format_number(r.external_acc) + ',' + format_number(r.class_variance);
    else
      out += ",,,";
    out += '\n';
  }
  return out;
}

std::string timings_csv(const std::vector<RoundReport>& reports) {
  std::string out = "round,wall_seconds\n";
  for (const auto& r : reports) out += std::to_string(r.round) + ',' + format_number(r.wall_seconds) + '\n';
  return out;
}

SeedRun run_seed(const ExperimentConfig& cfg, const LoadedData& data, std::uint64_t seed,
                 const fs::path& checkpoint_dir) {
  cfg.validate(false);
  PartitionPlan plan = cfg.partition;
  plan.seed = seed;
  const auto part = partition(data.train, plan);
  FedConfig fed = cfg.federation;
  fed.seed = seed;
  const auto spec = arch_spec(cfg, data.train);

  const std::size_t T = fed.rounds;
  RoundObserver<float> observe = [&](const RoundState<float>& s, RoundReport& rep) {
    if (s.round % cfg.eval_every != 0 && s.round != T) return;
    const auto lt = local_test(s.global, std::span<const ClientDataset>(part.clients));
    const auto gt = global_test(s.global, data.test);
    rep.evaluated = true;
    rep.mean_local_acc = lt.mean;
    rep.client_variance = lt.variance;
    rep.external_acc = gt.accuracy;
    rep.class_variance = gt.class_variance;
  };

  RoundState<float> state;
  const bool resumable = !checkpoint_dir.empty() && cfg.checkpoint_every > 0;
  if (resumable && fs::exists(checkpoint_dir / "manifest.json")) {
    state = load_round_checkpoint<float>(checkpoint_dir, fed);
  } else {
    state.global = Model<float>::build(spec, derive_seed(seed, Stream::init), static_cast<float>(cfg.bn_momentum));
  }
  fed.validate();
  while (state.round < T) {
    run_round(state, fed, std::span<const ClientDataset>(part.clients), observe);
    if (resumable && (state.round % cfg.checkpoint_every == 0 || state.round == T))
      save_round_checkpoint(checkpoint_dir, state, fed);
  }

  SeedRun run;
  run.seed = seed;
  run.local = local_test(state.global, std::span<const ClientDataset>(part.clients));
  run.global = global_test(state.global, data.test);
  run.state = std::move(state);
  return run;
}

void write_seed_outputs(const fs::path& dir, const SeedRun& run) {
  fs::create_directories(dir);
  write_file(dir / "rounds.csv", rounds_csv(run.state.reports));
  write_file(dir / "timings.csv", timings_csv(run.state.reports));
  save_model(run.state.global, dir / "final.ckpt");
  const RoundReport* last = nullptr;
  for (const auto& r : run.state.reports)
    if (r.evaluated) last = &r;
  nlohmann::json s = {{"seed", run.seed},
                      {"rounds_csv_schema", kRoundsCsvSchema},
                      {"rounds", run.state.round},
                      {"per_client_accuracy", run.local.accuracy},
                      {"client_ids", run.local.client_ids},
                      {"per_class_accuracy", run.global.per_class},
                      {"warnings", run.local.warnings}};
  if (last)
    s["final"] = {{"round", last->round},
                  {"mean_local_acc", last->mean_local_acc},
                  {"client_variance", last->client_variance},
                  {"external_acc", last->external_acc},
                  {"class_variance", last->class_variance}};
  write_file(dir / "summary.json", s.dump(1) + "\n");
}

int run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate(true);
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_file(out / "config.resolved.json", config_to_json(cfg).dump(1) + "\n");
  const LoadedData data = load_data(cfg);

  std::vector<int> ok(cfg.seeds.size(), 0);
  std::vector<SeedRun> runs(cfg.seeds.size());
  std::mutex log_mu;
  parallel_for(cfg.seeds.size(), cfg.threads, [&](std::size_t i) {
    const auto seed = cfg.seeds[i];
    const fs::path dir = out / ("seed-" + std::to_string(seed));
    fs::create_directories(dir);
    write_file(dir / "INCOMPLETE", "running\n");
    try {
      runs[i] = run_seed(cfg, data, seed, dir / "checkpoint");
      write_seed_outputs(dir, runs[i]);
      fs::remove(dir / "INCOMPLETE");
      ok[i] = 1;
      std::lock_guard lk(log_mu);
      log << "seed " << seed << ": mean local acc " << format_number(runs[i].local.mean) << "%, client variance "
          << format_number(runs[i].local.variance) << ", external acc " << format_number(runs[i].global.accuracy)
          << "%, class variance " << format_number(runs[i].global.class_variance) << '\n';
    } catch (const std::exception& e) {
      write_file(dir / "INCOMPLETE", std::string("failed: ") + e.what() + "\n");
      std::lock_guard lk(log_mu);
      log << "seed " << seed << " failed: " << e.what() << '\n';
    }
  });

  nlohmann::json index = {{"preset", cfg.preset}, {"method", to_string(cfg.federation.method)}, {"seeds", nlohmann::json::array()}};
  for (std::size_t i = 0; i < runs.size(); ++i) {
    nlohmann::json e = {{"seed", cfg.seeds[i]}, {"complete", ok[i] == 1}};
    if (ok[i])
      e.update({{"mean_local_acc", runs[i].local.mean},
                {"client_variance", runs[i].local.variance},
                {"external_acc", runs[i].global.accuracy},
                {"class_variance", runs[i].global.class_variance}});
    index["seeds"].push_back(e);
  }
  write_file(out / "summary.json", index.dump(1) + "\n");
  for (int v : ok)
    if (!v) return 1;
  return 0;
}

std::vector<std::size_t> parse_aug_starts(const std::string& list, std::size_t rounds) {
  std::vector<std::size_t> out;
  std::stringstream ss(list);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      std::size_t pos = 0;
      if (tok.back() == 'T') {
        const double f = std::stod(tok.substr(0, tok.size() - 1), &pos);
        if (pos != tok.size() - 1 || !(f > 0)) throw std::invalid_argument(tok);
        out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(rounds)))));
      } else {
        const unsigned long long v = std::stoull(tok, &pos);
        if (pos != tok.size() || v == 0) throw std::invalid_argument(tok);
        out.push_back(static_cast<std::size_t>(v));
      }
    } catch (const std::logic_error&) {
      throw ConfigError("aug starts: cannot parse '" + tok + "'");
    }
  }
  if (out.empty()) throw ConfigError("aug starts: empty list");
  return out;
}

std::vector<SweepRow> sweep_aug_start(const ExperimentConfig& cfg, const LoadedData& data,
                                      std::span<const std::size_t> starts) {
  std::vector<SweepRow> rows(starts.size() * cfg.seeds.size());
  parallel_for(rows.size(), cfg.threads, [&](std::size_t i) {
    ExperimentConfig c = cfg;
    c.federation.method = Method::fed_zdac;
    c.federation.aug_start = starts[i / cfg.seeds.size()];
    const auto seed = cfg.seeds[i % cfg.seeds.size()];
    const SeedRun run = run_seed(c, data, seed);
    rows[i] = {c.federation.aug_start, seed, run.local.mean, run.local.variance, run.global.accuracy,
               run.global.class_variance};
  });
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "aug_start,seed,mean_local_acc,client_variance,external_acc,class_variance\n";
  for (const auto& r : rows)
    out += std::to_string(r.aug_start) + ',' + std::to_string(r.seed) + ',' + format_number(r.mean_local_acc) + ',' +
           format_number(r.client_variance) + ',' + format_number(r.external_acc) + ',' +
           format_number(r.class_variance) + '\n';
  return out;
}

AuditSets audit_client_sets(const ExperimentConfig& cfg) {
  AuditSets out;
  auto& a = out.a;
  auto& b = out.b;
  const auto& s = cfg.audit;
  const std::size_t K = cfg.dataset.toy_classes;
  const Dataset pool = make_toy_dataset(K, s.items_per_client * (s.clients + 2), cfg.seeds.front(), 1, 8, 8,
                                        cfg.dataset.toy_noise);
  std::vector<std::vector<std::size_t>> by_class(K);
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[static_cast<std::size_t>(pool.labels[i])].push_back(i);
  std::vector<std::size_t> cursor(K, 0);
  auto take = [&](const std::vector<std::size_t>& classes) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < s.items_per_client; ++i) {
      const std::size_t c = classes[i % classes.size()];
      idx.push_back(by_class[c][cursor[c]++]);
    }
    return pool.subset(idx);
  };
  std::vector<std::size_t> all(K);
  for (std::size_t c = 0; c < K; ++c) all[c] = c;
  const std::vector<std::size_t> first{0, 1 % K}, second{2 % K, 3 % K};
  a.push_back(take(first));
  b.push_back(s.identical ? a.front() : take(second));
  for (std::size_t i = 1; i < s.clients; ++i) {
    a.push_back(take(all));
    b.push_back(a.back());
  }
  return out;
}

AuditConfig audit_config(const ExperimentConfig& cfg) {
  AuditConfig ac;
  ac.arch = ArchitectureSpec{Architecture::toy_cnn, 1, 8, 8, cfg.dataset.toy_classes};
  ac.runs = cfg.audit.runs;
  ac.train = cfg.audit.train;
  ac.zsdg = cfg.federation.zsdg;
  ac.quota = cfg.audit.quota;
  ac.quota_sweep = cfg.audit.quota_sweep;
  ac.bins = cfg.audit.bins;
  ac.resamples = cfg.audit.resamples;
  ac.probe_size = cfg.audit.probe_size;
  ac.seed = cfg.seeds.front();
  return ac;
}

}  // namespace fedzda
