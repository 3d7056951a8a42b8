#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedzda/dataset.hpp"
#include "fedzda/federation.hpp"
#include "fedzda/model.hpp"
#include "fedzda/zsdg.hpp"

namespace fedzda {

struct MeanVariance {
  double mean = 0;      ///< percent
  double variance = 0;  ///< percent², population (divide by count)
};

/// Fractions in [0,1] → mean and population variance in percent units.
MeanVariance percent_stats(std::span<const double> fractions);

struct LocalTestStats {
  std::vector<std::size_t> client_ids;  ///< clients that were evaluated
  std::vector<double> accuracy;         ///< fraction per evaluated client
  double mean = 0;                      ///< percent, unweighted over clients
  double variance = 0;                  ///< percent²
  std::vector<std::string> warnings;    ///< skipped clients
};

struct GlobalTestStats {
  double accuracy = 0;             ///< percent over all items
  std::vector<double> per_class;   ///< fraction correct per true class
  double class_mean = 0;           ///< percent
  double class_variance = 0;       ///< percent²
  std::vector<std::vector<std::size_t>> confusion;  ///< [true][predicted]
};

/// Fraction of correct eval-mode predictions.
template <typename T>
double accuracy(const Model<T>& model, const Dataset& ds);

/// Eval-mode accuracy on every client's local test split. Clients with an
/// empty test split are skipped with a warning.
template <typename T>
LocalTestStats local_test(const Model<T>& model, std::span<const ClientDataset> clients);

/// Throws ConfigError if any class is absent from `external`.
template <typename T>
GlobalTestStats global_test(const Model<T>& model, const Dataset& external);

/// Same statistics from precomputed predictions.
GlobalTestStats global_test_from_predictions(std::span<const int> labels, std::span<const int> predicted,
                                             std::size_t classes);

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 10;
  double learning_rate = 0.02;
};

/// Centralized SGD on the full dataset from Model::build(spec, seed).
template <typename T>
Model<T> train_oracle(const Dataset& ds, const ArchitectureSpec& spec, const TrainConfig& cfg, std::uint64_t seed);

struct OracleReport {
  double oracle_test_accuracy = -1;  ///< percent, −1 when no test set was given
  std::vector<double> oracle_per_class;     ///< fraction of samples the oracle assigns to their target
  std::vector<double> generator_per_class;  ///< same under the generating model
  double oracle_mean = 0;     ///< mean of oracle_per_class
  double generator_mean = 0;  ///< mean of generator_per_class
};

/// Throws ConfigError when shapes or class counts disagree.
template <typename T>
OracleReport eval_synthetic(const Model<T>& oracle, const Model<T>& generator, const SyntheticBatch<T>& batch);

struct QualityRegime {
  std::string name;          ///< centralized, federated_iid, federated_non_iid
  double test_accuracy = 0;  ///< percent
  double zsdg_final_loss = 0;
  double zsdg_initial_loss = 0;
};

struct QualityStudyConfig {
  ArchitectureSpec arch;
  FedConfig fed;  ///< method is forced to fedavg
  PartitionPlan non_iid;  ///< mode unimodal or multimodal
  ZsdgConfig zsdg;
  /// Centralized epochs; 0 matches the federated sample budget
  /// (rounds · |S_t| · E · items per client).
  std::size_t central_epochs = 0;
  std::uint64_t seed = 1;
};

struct QualityStudyReport {
  std::vector<QualityRegime> regimes;  ///< centralized, federated_iid, federated_non_iid
  std::vector<SyntheticBatch<float>> samples;
  bool ordered() const;  ///< accuracies non-increasing in regime order
};

/// Trains the three regimes on `train`, evaluates on `test`, and inverts each model.
QualityStudyReport model_quality_study(const QualityStudyConfig& cfg, const Dataset& train, const Dataset& test);

}  // namespace fedzda
