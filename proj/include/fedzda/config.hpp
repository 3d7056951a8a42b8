#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedzda/dataset.hpp"
#include "fedzda/dpaudit.hpp"
#include "fedzda/federation.hpp"
#include "fedzda/metrics.hpp"
#include "fedzda/model.hpp"
#include "fedzda/zsdg.hpp"

namespace fedzda {

/// Dataset root: $FEDZDA_DATA_ROOT if set, else the directory compiled in.
std::filesystem::path data_root();

struct DatasetSpec {
  /// mnist5k | mnist | cifar10 | toy
  std::string name = "mnist5k";
  /// Directory holding the files; empty means data_root()/<name>.
  std::string path;
  /// Use only the first n training items (0 keeps all).
  std::size_t train_limit = 0;
  std::size_t toy_classes = 4;
  std::size_t toy_train_per_class = 100;
  std::size_t toy_test_per_class = 50;
  double toy_noise = 0.15;

  std::filesystem::path resolved_path() const;
};

struct AuditSection {
  std::size_t runs = 50;
  std::size_t clients = 5;
  std::size_t items_per_client = 40;
  /// Differing clients hold the same classes instead of disjoint ones.
  bool identical = false;
  std::size_t quota = 0;
  std::vector<std::size_t> quota_sweep{0, 10, 50};
  std::size_t bins = 32;
  std::size_t resamples = 200;
  std::size_t probe_size = 64;
  LocalTrainConfig train{2, 10, 0.05, 0.0};
};

struct OracleSection {
  TrainConfig train{10, 10, 0.02};
  /// Synthetic items per class graded by the oracle.
  std::size_t per_class = 64;
};

struct ExperimentConfig {
  std::string preset;
  DatasetSpec dataset;
  Architecture arch = Architecture::mnist_cnn;
  double bn_momentum = kDefaultBnMomentum;
  PartitionPlan partition;
  FedConfig federation;  ///< federation.zsdg is the top-level zsdg section
  std::size_t eval_every = 1;
  std::string output_dir = "runs/default";
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  /// Seeds or sweep cells run concurrently.
  std::size_t threads = 1;
  /// Write a resumable round checkpoint every k rounds (0 = never).
  std::size_t checkpoint_every = 0;
  AuditSection audit;
  OracleSection oracle;

  /// Throws ConfigError naming the offending field; paths are checked when
  /// check_paths is set.
  void validate(bool check_paths = true) const;
};

std::vector<std::string> preset_names();
/// Throws ConfigError for unknown names.
ExperimentConfig preset(const std::string& name);

/// Fields present in `j` override the preset it names (or the default
/// preset). Unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
/// Every field, so the result is self-contained.
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace fedzda
