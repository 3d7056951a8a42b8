#include "fedzda/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "fedzda/checkpoint.hpp"
#include "fedzda/errors.hpp"
#include "fedzda/ops.hpp"

namespace fedzda {

std::string to_string(Method m) {
  switch (m) {
    case Method::fedavg: return "fedavg";
    case Method::fedprox: return "fedprox";
    case Method::fed_zdac: return "fed_zdac";
    case Method::fed_zdas: return "fed_zdas";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (auto m : {Method::fedavg, Method::fedprox, Method::fed_zdac, Method::fed_zdas})
    if (name == to_string(m)) return m;
  throw ConfigError("federation.method: unknown method '" + name + "' (fedavg|fedprox|fed_zdac|fed_zdas)");
}

std::string to_string(ClientWeighting w) { return w == ClientWeighting::uniform ? "uniform" : "data_size"; }

ClientWeighting parse_client_weighting(const std::string& name) {
  if (name == "uniform") return ClientWeighting::uniform;
  if (name == "data_size") return ClientWeighting::data_size;
  throw ConfigError("federation.weighting: unknown weighting '" + name + "' (uniform|data_size)");
}

void FedConfig::validate() const {
  if (rounds == 0) throw ConfigError("federation.rounds: must be at least 1");
  if (clients == 0) throw ConfigError("federation.clients: must be at least 1");
  if (!(participation > 0.0 && participation <= 1.0)) throw ConfigError("federation.participation: must lie in (0, 1]");
  if (local_epochs == 0) throw ConfigError("federation.local_epochs: must be at least 1");
  if (batch_size == 0) throw ConfigError("federation.batch_size: must be at least 1");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
    throw ConfigError("federation.learning_rate: must be finite and nonnegative");
  if (!(prox_mu >= 0) || !std::isfinite(prox_mu)) throw ConfigError("federation.prox_mu: must be finite and nonnegative");
  if (aug_start == 0) throw ConfigError("federation.aug_start: rounds are numbered from 1");
  if (threads == 0) throw ConfigError("federation.threads: must be at least 1");
  zsdg.validate(true);
}

std::size_t clients_per_round(std::size_t clients, double participation) {
  const auto k = static_cast<std::size_t>(std::llround(participation * static_cast<double>(clients)));
  return std::clamp<std::size_t>(k, 1, clients);
}

std::vector<std::size_t> sample_clients(std::size_t clients, double participation, Rng& rng) {
  if (!(participation > 0.0 && participation <= 1.0)) throw ConfigError("participation must lie in (0, 1]");
  const std::size_t k = clients_per_round(clients, participation);
  std::vector<std::size_t> ids(clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(ids[i], ids[i + rng.below(clients - i)]);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<std::size_t> sample_clients_for_round(const FedConfig& cfg, std::size_t round) {
  Rng rng(derive_seed(cfg.seed, Stream::sampling, {round}));
  return sample_clients(cfg.clients, cfg.participation, rng);
}

template <typename T>
LocalUpdateResult<T> local_update(const Model<T>& global, const Dataset& data, const LocalTrainConfig& cfg,
                                  Rng& rng) {
  if (data.empty()) throw ConfigError("local_update: empty dataset");
  if (cfg.batch_size == 0) throw ConfigError("local_update: batch size must be positive");
  LocalUpdateResult<T> out{global, 0.0, 0};
  Model<T>& model = out.model;
  model.set_requires_grad(true);

  std::vector<Tensor<T>> anchor;
  if (cfg.prox_mu > 0) anchor = global.parameters();
  const T lr = static_cast<T>(cfg.learning_rate), mu = static_cast<T>(cfg.prox_mu);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<int> labels;
  Tape<T> tape(std::is_same_v<T, double>);
  double loss_sum = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      labels.clear();
      for (std::size_t i : idx) labels.push_back(data.labels[i]);

      model.zero_grad();
      Var<T> x = tape.constant(data.batch<T>(idx));
      Var<T> loss = ops::softmax_xent(model.forward_train(tape, x), std::span<const int>(labels));
      const double l = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(l)) {
        tape.clear();
        throw NumericError("local_update: non-finite loss at step " + std::to_string(out.steps));
      }
      tape.backward(loss);
      loss_sum += l;
      ++out.steps;

      auto& params = model.parameters();
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto w = params[p].data();
        auto g = params[p].grad();
        if (cfg.prox_mu > 0) {
          auto a = anchor[p].data();
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] + mu * (w[i] - a[i]));
        } else {
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
        }
      }
    }
  }
  model.set_requires_grad(false);
  for (const auto& p : model.parameters())
    if (!p.all_finite()) throw NumericError("local_update: non-finite parameter after training");
  out.mean_loss = out.steps ? loss_sum / static_cast<double>(out.steps) : 0.0;
  return out;
}

namespace {

template <typename T>
void blend(std::span<T> out, std::span<const Tensor<T>* const> srcs, std::span<const double> w, std::size_t ref) {
  // out already holds srcs[ref]
  for (std::size_t e = 0; e < out.size(); ++e) {
    const T base = out[e];
    T acc = base;
    for (std::size_t i = 0; i < srcs.size(); ++i)
      if (i != ref) acc += static_cast<T>(w[i]) * ((*srcs[i])[e] - base);
    out[e] = acc;
  }
}

}  // namespace

template <typename T>
Model<T> aggregate(std::span<const Model<T>* const> models, std::span<const double> weights) {
  if (models.empty()) throw ConfigError("aggregate: no models");
  if (weights.size() != models.size()) throw ConfigError("aggregate: one weight per model required");
  double total = 0;
  for (double w : weights) {
    if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("aggregate: weights must be finite and nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("aggregate: weights must sum to 1");
  for (const auto* m : models)
    if (!m->same_architecture(*models[0])) throw ConfigError("aggregate: architecture mismatch");

  const std::size_t ref = static_cast<std::size_t>(std::max_element(weights.begin(), weights.end()) - weights.begin());
  Model<T> out = *models[ref];
  std::vector<const Tensor<T>*> srcs(models.size());
  auto& params = out.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < models.size(); ++i) srcs[i] = &models[i]->parameters()[p];
    blend<T>(params[p].data(), srcs, weights, ref);
  }
  auto& bn = out.bn_buffers();
  for (std::size_t l = 0; l < bn.size(); ++l) {
    for (std::size_t i = 0; i < models.size(); ++i) srcs[i] = &models[i]->bn_buffers()[l].mean;
    blend<T>(bn[l].mean.data(), srcs, weights, ref);
    for (std::size_t i = 0; i < models.size(); ++i) srcs[i] = &models[i]->bn_buffers()[l].var;
    blend<T>(bn[l].var.data(), srcs, weights, ref);
  }
  return out;
}

template <typename T>
Model<T> aggregate(const std::vector<Model<T>>& models, std::span<const double> weights) {
  std::vector<const Model<T>*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  return aggregate<T>(std::span<const Model<T>* const>(ptrs), weights);
}

namespace {

template <typename T>
struct ClientOutcome {
  bool ok = false;
  std::string error;
  LocalUpdateResult<T> result{Model<T>{}, 0.0, 0};
  std::size_t samples = 0;
  bool generated = false;
  double zsdg_loss = 0;
  std::size_t synthetic = 0;
};

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

}  // namespace

template <typename T>
void run_round(RoundState<T>& state, const FedConfig& cfg, std::span<const ClientDataset> clients,
               const RoundObserver<T>& observe) {
  if (clients.size() != cfg.clients)
    throw ConfigError("federation.clients: config says " + std::to_string(cfg.clients) + " but " +
                      std::to_string(clients.size()) + " client datasets were given");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t t = state.round + 1;
  RoundReport rep;
  rep.round = t;
  rep.method = cfg.method;
  rep.seed = cfg.seed;
  rep.sampled = sample_clients_for_round(cfg, t);

  const bool augment = cfg.method == Method::fed_zdac && t >= cfg.aug_start && cfg.zsdg.per_class > 0;
  const LocalTrainConfig ltc{cfg.local_epochs, cfg.batch_size, cfg.learning_rate,
                             cfg.method == Method::fedprox ? cfg.prox_mu : 0.0};
  const Model<T>& global = state.global;

  std::vector<ClientOutcome<T>> outcomes(rep.sampled.size());
  parallel_for(rep.sampled.size(), cfg.threads, [&](std::size_t k) {
    const std::size_t c = rep.sampled[k];
    auto& o = outcomes[k];
    try {
      const Dataset* data = &clients[c].train;
      Dataset mixed;
      if (augment) {
        auto synth = generate(global, cfg.zsdg, derive_seed(cfg.seed, Stream::zsdg_client, {t, c}));
        o.generated = true;
        o.zsdg_loss = synth.final_loss.front().total;
        o.synthetic = synth.size();
        mixed = clients[c].train;
        mixed.append(synth.to_dataset());
        data = &mixed;
      }
      Rng rng(derive_seed(cfg.seed, Stream::local_train, {t, c}));
      o.result = local_update(global, *data, ltc, rng);
      o.samples = data->size();
      o.ok = true;
    } catch (const std::exception& e) {
      o.error = "client " + std::to_string(c) + ": " + e.what();
    }
  });

  std::vector<const Model<T>*> models;
  std::vector<double> weights;
  double loss_sum = 0, zsum = 0;
  std::size_t generations = 0;
  for (std::size_t k = 0; k < outcomes.size(); ++k) {
    auto& o = outcomes[k];
    if (o.generated) {
      ++generations;
      zsum += o.zsdg_loss;
      rep.zsdg_loss_max = std::max(rep.zsdg_loss_max, o.zsdg_loss);
      rep.synthetic_count += o.synthetic;
    }
    if (!o.ok) {
      rep.failed.push_back(rep.sampled[k]);
      rep.failures.push_back(o.error);
      continue;
    }
    models.push_back(&o.result.model);
    weights.push_back(cfg.weighting == ClientWeighting::uniform ? 1.0 : static_cast<double>(o.samples));
    loss_sum += o.result.mean_loss;
  }

  if (!models.empty()) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    for (double& w : weights) w /= wsum;
    rep.train_loss = loss_sum / static_cast<double>(models.size());
    Model<T> next = aggregate<T>(std::span<const Model<T>* const>(models), weights);

    if (cfg.method == Method::fed_zdas && cfg.server_epochs > 0 && cfg.zsdg.per_class > 0) {
      try {
        auto fake = generate_balanced<T>(std::span<const Model<T>* const>(models), cfg.zsdg.per_class, cfg.zsdg,
                                         derive_seed(cfg.seed, Stream::zsdg_server, {t}));
        for (const auto& f : fake.final_loss) {
          ++generations;
          zsum += f.total;
          rep.zsdg_loss_max = std::max(rep.zsdg_loss_max, f.total);
        }
        rep.synthetic_count += fake.size();
        Rng srv(derive_seed(cfg.seed, Stream::server_train, {t}));
        const LocalTrainConfig stc{cfg.server_epochs, cfg.batch_size, cfg.learning_rate, 0.0};
        // Running stats are what the fake data was fitted to; keep them.
        const T momentum = next.bn_momentum();
        next.set_bn_momentum(T(0));
        next = local_update(next, fake.to_dataset(), stc, srv).model;
        next.set_bn_momentum(momentum);
      } catch (const std::exception& e) {
        rep.failures.push_back(std::string("server: ") + e.what());
      }
    }
    state.global = std::move(next);
  }
  if (generations) rep.zsdg_loss_mean = zsum / static_cast<double>(generations);

  state.round = t;
  state.sampled = rep.sampled;
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (observe) observe(state, rep);
  state.reports.push_back(std::move(rep));
}

template <typename T>
RoundState<T> run_federation(const FedConfig& cfg, std::span<const ClientDataset> clients, RoundState<T> state,
                             const RoundObserver<T>& observe) {
  cfg.validate();
  while (state.round < cfg.rounds) run_round(state, cfg, clients, observe);
  return state;
}

template <typename T>
RoundState<T> run_federation(const FedConfig& cfg, std::span<const ClientDataset> clients, const Model<T>& initial,
                             const RoundObserver<T>& observe) {
  RoundState<T> s;
  s.global = initial;
  return run_federation(cfg, clients, std::move(s), observe);
}

template <typename T>
RoundState<T> run_fed_zdac(const FedConfig& cfg, std::span<const ClientDataset> clients, const Model<T>& initial,
                           const RoundObserver<T>& observe) {
  if (cfg.method != Method::fed_zdac) throw ConfigError("run_fed_zdac: federation.method must be fed_zdac");
  return run_federation(cfg, clients, initial, observe);
}

template <typename T>
RoundState<T> run_fed_zdas(const FedConfig& cfg, std::span<const ClientDataset> clients, const Model<T>& initial,
                           const RoundObserver<T>& observe) {
  if (cfg.method != Method::fed_zdas) throw ConfigError("run_fed_zdas: federation.method must be fed_zdas");
  return run_federation(cfg, clients, initial, observe);
}

// ---- checkpoints -----------------------------------------------------------

namespace {

nlohmann::json report_json(const RoundReport& r) {
  return {{"round", r.round},
          {"method", to_string(r.method)},
          {"seed", r.seed},
          {"sampled", r.sampled},
          {"failed", r.failed},
          {"failures", r.failures},
          {"train_loss", r.train_loss},
          {"synthetic_count", r.synthetic_count},
          {"zsdg_loss_mean", r.zsdg_loss_mean},
          {"zsdg_loss_max", r.zsdg_loss_max},
          {"evaluated", r.evaluated},
          {"mean_local_acc", r.mean_local_acc},
          {"client_variance", r.client_variance},
          {"external_acc", r.external_acc},
          {"class_variance", r.class_variance},
          {"wall_seconds", r.wall_seconds}};
}

RoundReport report_from_json(const nlohmann::json& j) {
  RoundReport r;
  r.round = j.at("round");
  r.method = parse_method(j.at("method"));
  r.seed = j.at("seed");
  r.sampled = j.at("sampled").get<std::vector<std::size_t>>();
  r.failed = j.at("failed").get<std::vector<std::size_t>>();
  r.failures = j.at("failures").get<std::vector<std::string>>();
  r.train_loss = j.at("train_loss");
  r.synthetic_count = j.at("synthetic_count");
  r.zsdg_loss_mean = j.at("zsdg_loss_mean");
  r.zsdg_loss_max = j.at("zsdg_loss_max");
  r.evaluated = j.at("evaluated");
  r.mean_local_acc = j.at("mean_local_acc");
  r.client_variance = j.at("client_variance");
  r.external_acc = j.at("external_acc");
  r.class_variance = j.at("class_variance");
  r.wall_seconds = j.at("wall_seconds");
  return r;
}

}  // namespace

template <typename T>
void save_round_checkpoint(const std::filesystem::path& dir, const RoundState<T>& state, const FedConfig& cfg) {
  std::filesystem::create_directories(dir);
  save_model(state.global, dir / "global.ckpt");
  nlohmann::json m = {{"version", 1},
                      {"round", state.round},
                      {"seed", cfg.seed},
                      {"method", to_string(cfg.method)},
                      {"sampled", state.sampled},
                      {"reports", nlohmann::json::array()}};
  for (const auto& r : state.reports) m["reports"].push_back(report_json(r));
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    f << m.dump(1) << '\n';
    if (!f) throw ParseError(ParseError::Kind::io, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

template <typename T>
RoundState<T> load_round_checkpoint(const std::filesystem::path& dir, const FedConfig& cfg) {
  std::ifstream f(dir / "manifest.json", std::ios::binary);
  if (!f) throw ParseError(ParseError::Kind::io, "cannot open " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseError::Kind::bad_format, "manifest.json: " + std::string(e.what()));
  }
  if (m.value("version", 0) != 1) throw ParseError(ParseError::Kind::bad_format, "manifest.json: unknown version");
  if (m.at("seed").get<std::uint64_t>() != cfg.seed || m.at("method").get<std::string>() != to_string(cfg.method))
    throw ConfigError("checkpoint was written for a different seed or method");
  RoundState<T> s;
  s.round = m.at("round");
  s.sampled = m.at("sampled").get<std::vector<std::size_t>>();
  for (const auto& r : m.at("reports")) s.reports.push_back(report_from_json(r));
  s.global = load_model<T>(dir / "global.ckpt");
  return s;
}

#define FEDZDA_INSTANTIATE_FED(T)                                                                             \
  template LocalUpdateResult<T> local_update(const Model<T>&, const Dataset&, const LocalTrainConfig&, Rng&); \
  template Model<T> aggregate(std::span<const Model<T>* const>, std::span<const double>);                     \
  template Model<T> aggregate(const std::vector<Model<T>>&, std::span<const double>);                         \
  template void run_round(RoundState<T>&, const FedConfig&, std::span<const ClientDataset>,                   \
                          const RoundObserver<T>&);                                                           \
  template RoundState<T> run_federation(const FedConfig&, std::span<const ClientDataset>, RoundState<T>,      \
                                        const RoundObserver<T>&);                                             \
  template RoundState<T> run_federation(const FedConfig&, std::span<const ClientDataset>, const Model<T>&,    \
                                        const RoundObserver<T>&);                                             \
  template RoundState<T> run_fed_zdac(const FedConfig&, std::span<const ClientDataset>, const Model<T>&,      \
                                      const RoundObserver<T>&);                                               \
  template RoundState<T> run_fed_zdas(const FedConfig&, std::span<const ClientDataset>, const Model<T>&,      \
                                      const RoundObserver<T>&);                                               \
  template void save_round_checkpoint(const std::filesystem::path&, const RoundState<T>&, const FedConfig&);  \
  template RoundState<T> load_round_checkpoint(const std::filesystem::path&, const FedConfig&);

FEDZDA_INSTANTIATE_FED(float)
FEDZDA_INSTANTIATE_FED(double)

}  // namespace fedzda
