#include "fedzda/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <type_traits>

#include "fedzda/errors.hpp"

#ifndef FEDZDA_DEFAULT_DATA_DIR
#define FEDZDA_DEFAULT_DATA_DIR "data"
#endif

namespace fedzda {

using nlohmann::json;

std::filesystem::path data_root() {
  if (const char* env = std::getenv("FEDZDA_DATA_ROOT"); env && *env) return env;
  return FEDZDA_DEFAULT_DATA_DIR;
}

std::filesystem::path DatasetSpec::resolved_path() const {
  if (!path.empty()) return path;
  if (name == "cifar10") return data_root() / "cifar-10-batches-bin";
  return data_root() / name;
}

// ---- presets ---------------------------------------------------------------

std::vector<std::string> preset_names() {
  return {"desk-mnist-unimodal", "desk-mnist-multimodal", "desk-toy", "full-mnist-unimodal",
          "full-cifar-unimodal"};
}

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  c.federation.zsdg.iterations = 40;
  c.federation.zsdg.per_class = 5;
  if (name == "desk-mnist-unimodal") {
    c.output_dir = "runs/desk-mnist-unimodal";
  } else if (name == "desk-mnist-multimodal") {
    c.partition.mode = PartitionMode::multimodal;
    const double w[] = {0.6, 0.3, 0.1};
    c.partition.groups = contiguous_groups(10, w);
    c.output_dir = "runs/desk-mnist-multimodal";
  } else if (name == "desk-toy") {
    c.dataset.name = "toy";
    c.arch = Architecture::toy_cnn;
    c.partition.clients = 8;
    c.federation.clients = 8;
    c.partition.shards_per_client = 1;
    c.federation.participation = 0.5;
    c.federation.rounds = 10;
    c.federation.aug_start = 8;
    c.federation.local_epochs = 2;
    c.federation.learning_rate = 0.05;
    c.federation.zsdg.iterations = 50;
    c.federation.zsdg.per_class = 5;
    c.oracle.train.epochs = 5;
    c.oracle.per_class = 16;
    c.output_dir = "runs/desk-toy";
  } else if (name == "full-mnist-unimodal") {
    c.dataset.name = "mnist";
    c.partition.clients = 100;
    c.federation.clients = 100;
    c.federation.participation = 0.1;
    c.federation.rounds = 100;
    c.federation.aug_start = 80;
    c.federation.zsdg.iterations = 500;
    c.federation.zsdg.per_class = 10;
    c.output_dir = "runs/full-mnist-unimodal";
  } else if (name == "full-cifar-unimodal") {
    c.dataset.name = "cifar10";
    c.arch = Architecture::cifar_cnn;
    c.partition.clients = 100;
    c.federation.clients = 100;
    c.federation.participation = 0.1;
    c.federation.rounds = 100;
    c.federation.aug_start = 80;
    c.federation.zsdg.iterations = 500;
    c.federation.zsdg.per_class = 10;
    c.output_dir = "runs/full-cifar-unimodal";
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("preset: unknown preset '" + name + "' (" + known + ")");
  }
  return c;
}

// ---- validation ------------------------------------------------------------

void ExperimentConfig::validate(bool check_paths) const {
  static const std::set<std::string> names{"mnist5k", "mnist", "cifar10", "toy"};
  if (!names.count(dataset.name)) throw ConfigError("dataset.name: unknown dataset '" + dataset.name + "'");
  if (dataset.name == "toy") {
    if (dataset.toy_classes < 2) throw ConfigError("dataset.toy_classes: must be at least 2");
    if (dataset.toy_train_per_class == 0 || dataset.toy_test_per_class == 0)
      throw ConfigError("dataset.toy_train_per_class: must be positive");
    if (!(dataset.toy_noise >= 0)) throw ConfigError("dataset.toy_noise: must be nonnegative");
  } else if (check_paths && !std::filesystem::is_directory(dataset.resolved_path())) {
    throw ConfigError("dataset.path: directory '" + dataset.resolved_path().string() + "' does not exist");
  }
  if (!(bn_momentum >= 0 && bn_momentum <= 1)) throw ConfigError("model.bn_momentum: must lie in [0, 1]");
  if (partition.clients != federation.clients)
    throw ConfigError("partition.clients: must equal federation.clients");
  const std::size_t classes = dataset.name == "toy" ? dataset.toy_classes : 10;
  partition.validate(classes);
  federation.validate();
  if (eval_every == 0) throw ConfigError("metrics.eval_every: must be at least 1");
  if (seeds.empty()) throw ConfigError("seeds: list must not be empty");
  if (threads == 0) throw ConfigError("threads: must be at least 1");
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
  if (audit.runs < 30) throw ConfigError("audit.runs: at least 30 runs are required");
  if (audit.clients == 0) throw ConfigError("audit.clients: must be at least 1");
  if (audit.items_per_client == 0) throw ConfigError("audit.items_per_client: must be positive");
  if (oracle.per_class == 0) throw ConfigError("oracle.per_class: must be positive");
  if (oracle.train.batch_size == 0) throw ConfigError("oracle.batch_size: must be positive");
}

// ---- JSON ------------------------------------------------------------------

namespace {

class Reader {
 public:
  Reader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(name("") + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected true or false");
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0 && !v.is_number_unsigned()))
          throw ConfigError("expected a nonnegative integer");
        out = v.get<T>();
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("expected a number");
        out = v.get<T>();
      } else if constexpr (std::is_same_v<T, std::vector<std::size_t>> ||
                           std::is_same_v<T, std::vector<std::uint64_t>>) {
        if (!v.is_array()) throw ConfigError("expected an array");
        T tmp;
        for (const auto& e : v) {
          if (!e.is_number_unsigned()) throw ConfigError("expected nonnegative integers");
          tmp.push_back(e.get<typename T::value_type>());
        }
        out = std::move(tmp);
      } else {
        out = v.get<T>();
      }
    } catch (const ConfigError& e) {
      throw ConfigError(name(key) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ConfigError(name(key) + ": " + e.what());
    }
  }

  const json* section(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(name(it.key()) + ": unknown key");
  }

 private:
  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

void read_zsdg(const json& j, ZsdgConfig& z) {
  Reader r(j, "zsdg");
  std::string opt = to_string(z.optimizer);
  r.get("iterations", z.iterations);
  r.get("step_size", z.step_size);
  r.get("per_class", z.per_class);
  r.get("optimizer", opt);
  r.get("init_mean", z.init_mean);
  r.get("init_std", z.init_std);
  r.get("lambda_bn", z.lambda_bn);
  r.get("lambda_ce", z.lambda_ce);
  r.get("clamp_min", z.clamp_min);
  r.get("clamp_max", z.clamp_max);
  r.finish();
  z.optimizer = parse_zsdg_optimizer(opt);
}

json zsdg_json(const ZsdgConfig& z) {
  return {{"iterations", z.iterations}, {"step_size", z.step_size}, {"per_class", z.per_class},
          {"optimizer", to_string(z.optimizer)}, {"init_mean", z.init_mean}, {"init_std", z.init_std},
          {"lambda_bn", z.lambda_bn}, {"lambda_ce", z.lambda_ce}, {"clamp_min", z.clamp_min},
          {"clamp_max", z.clamp_max}};
}

void read_train(const json& j, const std::string& prefix, std::size_t& epochs, std::size_t& batch, double& lr) {
  Reader r(j, prefix);
  r.get("epochs", epochs);
  r.get("batch_size", batch);
  r.get("learning_rate", lr);
  r.finish();
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  std::string preset_name = "desk-mnist-unimodal";
  if (j.contains("preset")) {
    if (!j.at("preset").is_string()) throw ConfigError("preset: expected a string");
    preset_name = j.at("preset").get<std::string>();
  }
  ExperimentConfig c = preset(preset_name);
  Reader top(j, "");
  top.get("preset", c.preset);
  top.get("output_dir", c.output_dir);
  top.get("seeds", c.seeds);
  top.get("threads", c.threads);
  top.get("checkpoint_every", c.checkpoint_every);

  if (const json* s = top.section("dataset")) {
    Reader r(*s, "dataset");
    r.get("name", c.dataset.name);
    r.get("path", c.dataset.path);
    r.get("train_limit", c.dataset.train_limit);
    r.get("toy_classes", c.dataset.toy_classes);
    r.get("toy_train_per_class", c.dataset.toy_train_per_class);
    r.get("toy_test_per_class", c.dataset.toy_test_per_class);
    r.get("toy_noise", c.dataset.toy_noise);
    r.finish();
  }
  if (const json* s = top.section("model")) {
    Reader r(*s, "model");
    std::string arch(to_string(c.arch));
    r.get("arch", arch);
    r.get("bn_momentum", c.bn_momentum);
    r.finish();
    try {
      c.arch = parse_architecture(arch);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("model.arch: ") + e.what());
    }
  }
  if (const json* s = top.section("partition")) {
    Reader r(*s, "partition");
    std::string mode = to_string(c.partition.mode);
    r.get("mode", mode);
    r.get("clients", c.partition.clients);
    r.get("shards_per_client", c.partition.shards_per_client);
    r.get("test_fraction", c.partition.test_fraction);
    if (const json* g = r.section("groups")) {
      if (!g->is_array()) throw ConfigError("partition.groups: expected an array");
      c.partition.groups.clear();
      for (const auto& e : *g) {
        Reader gr(e, "partition.groups[]");
        ClassGroup cg;
        gr.get("classes", cg.classes);
        gr.get("weight", cg.weight);
        gr.finish();
        c.partition.groups.push_back(cg);
      }
    }
    r.finish();
    try {
      c.partition.mode = parse_partition_mode(mode);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("partition.mode: ") + e.what());
    }
  }
  if (const json* s = top.section("federation")) {
    Reader r(*s, "federation");
    auto& f = c.federation;
    std::string method = to_string(f.method), weighting = to_string(f.weighting);
    r.get("rounds", f.rounds);
    r.get("clients", f.clients);
    r.get("participation", f.participation);
    r.get("local_epochs", f.local_epochs);
    r.get("batch_size", f.batch_size);
    r.get("learning_rate", f.learning_rate);
    r.get("method", method);
    r.get("prox_mu", f.prox_mu);
    r.get("aug_start", f.aug_start);
    r.get("server_epochs", f.server_epochs);
    r.get("weighting", weighting);
    r.get("threads", f.threads);
    r.finish();
    f.method = parse_method(method);
    f.weighting = parse_client_weighting(weighting);
  }
  if (j.contains("partition") && j.at("partition").contains("clients") &&
      !(j.contains("federation") && j.at("federation").contains("clients")))
    c.federation.clients = c.partition.clients;
  if (j.contains("federation") && j.at("federation").contains("clients") &&
      !(j.contains("partition") && j.at("partition").contains("clients")))
    c.partition.clients = c.federation.clients;

  if (const json* s = top.section("zsdg")) read_zsdg(*s, c.federation.zsdg);
  if (const json* s = top.section("metrics")) {
    Reader r(*s, "metrics");
    r.get("eval_every", c.eval_every);
    r.finish();
  }
  if (const json* s = top.section("audit")) {
    Reader r(*s, "audit");
    auto& a = c.audit;
    r.get("runs", a.runs);
    r.get("clients", a.clients);
    r.get("items_per_client", a.items_per_client);
    r.get("identical", a.identical);
    r.get("quota", a.quota);
    r.get("quota_sweep", a.quota_sweep);
    r.get("bins", a.bins);
    r.get("resamples", a.resamples);
    r.get("probe_size", a.probe_size);
    if (const json* t = r.section("train")) read_train(*t, "audit.train", a.train.epochs, a.train.batch_size, a.train.learning_rate);
    r.finish();
  }
  if (const json* s = top.section("oracle")) {
    Reader r(*s, "oracle");
    r.get("per_class", c.oracle.per_class);
    if (const json* t = r.section("train"))
      read_train(*t, "oracle.train", c.oracle.train.epochs, c.oracle.train.batch_size, c.oracle.train.learning_rate);
    r.finish();
  }
  top.finish();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json groups = json::array();
  for (const auto& g : c.partition.groups) groups.push_back({{"classes", g.classes}, {"weight", g.weight}});
  const auto& f = c.federation;
  const auto& a = c.audit;
  return {
      {"preset", c.preset},
      {"dataset",
       {{"name", c.dataset.name},
        {"path", c.dataset.path},
        {"train_limit", c.dataset.train_limit},
        {"toy_classes", c.dataset.toy_classes},
        {"toy_train_per_class", c.dataset.toy_train_per_class},
        {"toy_test_per_class", c.dataset.toy_test_per_class},
        {"toy_noise", c.dataset.toy_noise}}},
      {"model", {{"arch", std::string(to_string(c.arch))}, {"bn_momentum", c.bn_momentum}}},
      {"partition",
       {{"mode", to_string(c.partition.mode)},
        {"clients", c.partition.clients},
        {"shards_per_client", c.partition.shards_per_client},
        {"test_fraction", c.partition.test_fraction},
        {"groups", groups}}},
      {"federation",
       {{"rounds", f.rounds},
        {"clients", f.clients},
        {"participation", f.participation},
        {"local_epochs", f.local_epochs},
        {"batch_size", f.batch_size},
        {"learning_rate", f.learning_rate},
        {"method", to_string(f.method)},
        {"prox_mu", f.prox_mu},
        {"aug_start", f.aug_start},
        {"server_epochs", f.server_epochs},
        {"weighting", to_string(f.weighting)},
        {"threads", f.threads}}},
      {"zsdg", zsdg_json(f.zsdg)},
      {"metrics", {{"eval_every", c.eval_every}}},
      {"audit",
       {{"runs", a.runs},
        {"clients", a.clients},
        {"items_per_client", a.items_per_client},
        {"identical", a.identical},
        {"quota", a.quota},
        {"quota_sweep", a.quota_sweep},
        {"bins", a.bins},
        {"resamples", a.resamples},
        {"probe_size", a.probe_size},
        {"train",
         {{"epochs", a.train.epochs}, {"batch_size", a.train.batch_size}, {"learning_rate", a.train.learning_rate}}}}},
      {"oracle",
       {{"per_class", c.oracle.per_class},
        {"train",
         {{"epochs", c.oracle.train.epochs},
          {"batch_size", c.oracle.train.batch_size},
          {"learning_rate", c.oracle.train.learning_rate}}}}},
      {"output_dir", c.output_dir},
      {"seeds", c.seeds},
      {"threads", c.threads},
      {"checkpoint_every", c.checkpoint_every}};
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("config: cannot open '" + path.string() + "'");
  json j;
  try {
    j = json::parse(f, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace fedzda
