#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedzda/dataset.hpp"
#include "fedzda/model.hpp"
#include "fedzda/rng.hpp"
#include "fedzda/zsdg.hpp"

namespace fedzda {

enum class Method { fedavg, fedprox, fed_zdac, fed_zdas };

std::string to_string(Method m);
Method parse_method(const std::string& name);

enum class ClientWeighting { uniform, data_size };

std::string to_string(ClientWeighting w);
ClientWeighting parse_client_weighting(const std::string& name);

struct FedConfig {
  std::size_t rounds = 30;  ///< T
  std::size_t clients = 20;  ///< Z
  double participation = 0.25;  ///< γ
  std::size_t local_epochs = 5;  ///< E
  std::size_t batch_size = 10;  ///< B
  double learning_rate = 0.02;
  Method method = Method::fedavg;
  double prox_mu = 0.0;
  ZsdgConfig zsdg;
  /// First round (1-based) whose clients augment; anything above `rounds`
  /// disables augmentation.
  std::size_t aug_start = 24;
  std::size_t server_epochs = 1;
  ClientWeighting weighting = ClientWeighting::uniform;
  std::uint64_t seed = 1;
  /// Worker threads for client updates; results do not depend on it.
  std::size_t threads = 1;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// |S_t| = max(1, round(γ·Z)).
std::size_t clients_per_round(std::size_t clients, double participation);

/// Uniform sample without replacement, returned in ascending order.
std::vector<std::size_t> sample_clients(std::size_t clients, double participation, Rng& rng);
/// The sample for round t (1-based) under cfg.seed.
std::vector<std::size_t> sample_clients_for_round(const FedConfig& cfg, std::size_t round);

struct LocalTrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 10;
  double learning_rate = 0.02;
  double prox_mu = 0.0;
};

template <typename T>
struct LocalUpdateResult {
  Model<T> model;
  double mean_loss = 0;  ///< mean minibatch cross-entropy over all steps
  std::size_t steps = 0;
};

/// SGD on shuffled minibatches with BN in train mode. With prox_mu > 0 the
/// objective gains (μ/2)·‖w − w_global‖². Throws NumericError on a non-finite
/// loss and ConfigError on an empty dataset.
template <typename T>
LocalUpdateResult<T> local_update(const Model<T>& global, const Dataset& data, const LocalTrainConfig& cfg,
                                  Rng& rng);

/// Σ_i w_i·model_i over parameters and BN running statistics. Computed as
/// m_0 + Σ_{i≥1} w_i·(m_i − m_0), which is exact on identical replicas.
/// Throws ConfigError on mismatched architectures or invalid weights.
template <typename T>
Model<T> aggregate(std::span<const Model<T>* const> models, std::span<const double> weights);
template <typename T>
Model<T> aggregate(const std::vector<Model<T>>& models, std::span<const double> weights);

struct RoundReport {
  std::size_t round = 0;
  Method method = Method::fedavg;
  std::uint64_t seed = 0;
  std::vector<std::size_t> sampled;
  std::vector<std::size_t> failed;
  std::vector<std::string> failures;
  double train_loss = 0;  ///< mean over participating clients
  std::size_t synthetic_count = 0;
  double zsdg_loss_mean = 0;  ///< final ZSDG loss, mean over generations (0 if none)
  double zsdg_loss_max = 0;
  bool evaluated = false;
  double mean_local_acc = 0;  ///< percent
  double client_variance = 0;  ///< percent²
  double external_acc = 0;  ///< percent
  double class_variance = 0;  ///< percent²
  double wall_seconds = 0;
};

template <typename T>
struct RoundState {
  std::size_t round = 0;  ///< rounds completed
  Model<T> global;
  std::vector<std::size_t> sampled;
  std::vector<RoundReport> reports;
};

/// Called after each round; may fill the evaluation fields of the report.
template <typename T>
using RoundObserver = std::function<void(const RoundState<T>&, RoundReport&)>;

/// One communication round under cfg.method. Clients whose update fails are
/// excluded and the remaining weights renormalized; if every client fails the
/// global model is kept.
template <typename T>
void run_round(RoundState<T>& state, const FedConfig& cfg, std::span<const ClientDataset> clients,
               const RoundObserver<T>& observe = {});

/// Rounds state.round+1 .. cfg.rounds.
template <typename T>
RoundState<T> run_federation(const FedConfig& cfg, std::span<const ClientDataset> clients, RoundState<T> state,
                             const RoundObserver<T>& observe = {});

template <typename T>
RoundState<T> run_federation(const FedConfig& cfg, std::span<const ClientDataset> clients,
                             const Model<T>& initial, const RoundObserver<T>& observe = {});

/// Require cfg.method to match, then run_federation.
template <typename T>
RoundState<T> run_fed_zdac(const FedConfig& cfg, std::span<const ClientDataset> clients, const Model<T>& initial,
                           const RoundObserver<T>& observe = {});
template <typename T>
RoundState<T> run_fed_zdas(const FedConfig& cfg, std::span<const ClientDataset> clients, const Model<T>& initial,
                           const RoundObserver<T>& observe = {});

/// global.ckpt (model blob) and manifest.json (round, seed, method, reports).
/// All randomness is derived from (seed, round, client, purpose), so the round
/// index is the entire generator state.
template <typename T>
void save_round_checkpoint(const std::filesystem::path& dir, const RoundState<T>& state, const FedConfig& cfg);
template <typename T>
RoundState<T> load_round_checkpoint(const std::filesystem::path& dir, const FedConfig& cfg);

}  // namespace fedzda
