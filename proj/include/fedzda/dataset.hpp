#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedzda/tensor.hpp"

namespace fedzda {

/// Labeled images, N×C×H×W floats in [0, 1].
struct Dataset {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::size_t image_size() const noexcept { return channels * height * width; }
  std::span<const float> image(std::size_t i) const;

  /// Same geometry, no items.
  Dataset like() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  void append(const Dataset& other);
  void push_back(std::span<const float> image, int label);
  std::vector<std::size_t> histogram() const;
  /// Throws ConfigError when labels, pixel range or image count are inconsistent.
  void validate() const;

  template <typename T>
  Tensor<T> batch(std::span<const std::size_t> indices) const;
  template <typename T>
  Tensor<T> all_images() const;
};

/// One client's shard after partitioning and local splitting.
struct ClientDataset {
  std::size_t id = 0;
  Dataset train;
  Dataset test;
  /// Class counts of train + test.
  std::vector<std::size_t> histogram;

  std::size_t size() const noexcept { return train.size() + test.size(); }
};

// ---- ingestion -------------------------------------------------------------

/// IDX images (magic 0x00000803) and labels (0x00000801), big-endian extents.
/// Gzip-compressed files are read transparently.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path, std::size_t classes = 10);

enum class CifarSplit { train, test };

/// CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record):
/// data_batch_1..5.bin for train, test_batch.bin for test.
Dataset load_cifar10(const std::filesystem::path& dir, CifarSplit split = CifarSplit::train);
Dataset load_cifar10_file(const std::filesystem::path& file);

/// Gaussian-noise images around one random block prototype per class.
Dataset make_toy_dataset(std::size_t classes, std::size_t per_class, std::uint64_t seed,
                         std::size_t channels = 1, std::size_t height = 8, std::size_t width = 8,
                         double noise = 0.15);

// ---- partitioning ----------------------------------------------------------

enum class PartitionMode { unimodal, multimodal, iid };

std::string to_string(PartitionMode m);
PartitionMode parse_partition_mode(const std::string& name);

/// A subpopulation: a disjoint class subset and its prevalence weight.
struct ClassGroup {
  std::vector<int> classes;
  double weight = 0.0;
};

struct PartitionPlan {
  PartitionMode mode = PartitionMode::unimodal;
  std::size_t clients = 20;
  std::size_t shards_per_client = 2;
  std::vector<ClassGroup> groups;  // multimodal only
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate(std::size_t classes) const;
};

struct PartitionResult {
  std::vector<ClientDataset> clients;
  /// Source items not assigned to any client (multimodal subsampling).
  std::size_t dropped = 0;
  std::vector<std::string> warnings;
};

/// Label-sorted contiguous shards dealt at random, shards_per_client each.
/// Items left over after equal shard sizing join the last shard.
std::vector<ClientDataset> partition_unimodal(const Dataset& ds, std::size_t clients,
                                              std::size_t shards_per_client, std::uint64_t seed);

/// Subpopulations over disjoint class groups. Clients are allotted to groups by
/// largest-remainder rounding of clients·weight. Each class keeps a fraction of
/// its items proportional to its group's per-class weight (the heaviest group
/// keeps everything), so the pooled class histogram follows the weights; the
/// retained items of a group are dealt round-robin to that group's clients.
PartitionResult partition_multimodal(const Dataset& ds, std::size_t clients,
                                     const std::vector<ClassGroup>& groups, std::uint64_t seed);

std::vector<ClientDataset> partition_iid(const Dataset& ds, std::size_t clients, std::uint64_t seed);

/// Largest-remainder apportionment of `total` seats by weight.
std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> weights);

/// `groups` equal contiguous class groups with the given weights.
std::vector<ClassGroup> contiguous_groups(std::size_t classes, std::span<const double> weights);

/// Moves a stratified test_fraction of the client's items into its test split.
/// Per class the test count is floor or ceil of the exact share, with the total
/// fixed at round(n·fraction) and clamped to [1, n−1] when n ≥ 2. The last
/// items of each class (in shard order) become test items.
ClientDataset local_split(const ClientDataset& cd, double test_fraction);

/// Partition per plan, then local_split every client.
PartitionResult partition(const Dataset& ds, const PartitionPlan& plan);

}  // namespace fedzda
