#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fedzda/config.hpp"
#include "fedzda/federation.hpp"
#include "fedzda/metrics.hpp"

namespace fedzda {

struct LoadedData {
  Dataset train;
  Dataset test;
};

/// Reads the dataset named in the config (train_limit applied).
LoadedData load_data(const ExperimentConfig& cfg);
ArchitectureSpec arch_spec(const ExperimentConfig& cfg, const Dataset& ds);

/// rounds.csv schema version; bump when columns change.
inline constexpr int kRoundsCsvSchema = 1;

/// Columns: round,method,seed,sampled,failed,train_loss,synthetic_count,
/// zsdg_loss_mean,zsdg_loss_max,mean_local_acc,client_variance,external_acc,
/// class_variance. Lists are ';'-separated; metrics of rounds that were not
/// evaluated are empty. Numbers use the shortest round-trip form.
std::string rounds_csv(const std::vector<RoundReport>& reports);
/// round,wall_seconds
std::string timings_csv(const std::vector<RoundReport>& reports);

struct SeedRun {
  std::uint64_t seed = 0;
  RoundState<float> state;
  LocalTestStats local;    ///< final model
  GlobalTestStats global;  ///< final model on the external test set
};

/// Partition, build, federate and evaluate every eval_every rounds and at the
/// last round. With a checkpoint directory, state is saved every
/// cfg.checkpoint_every rounds and an existing checkpoint is resumed.
SeedRun run_seed(const ExperimentConfig& cfg, const LoadedData& data, std::uint64_t seed,
                 const std::filesystem::path& checkpoint_dir = {});

/// rounds.csv, timings.csv, summary.json and final.ckpt in `dir`.
void write_seed_outputs(const std::filesystem::path& dir, const SeedRun& run);

/// All seeds into cfg.output_dir/seed-<s>/, plus config.resolved.json and an
/// index summary.json. A seed directory keeps an INCOMPLETE marker (holding
/// the error, if any) until it finishes. Returns 0 iff every seed completed.
int run_experiment(const ExperimentConfig& cfg, std::ostream& log);

struct SweepRow {
  std::size_t aug_start = 0;
  std::uint64_t seed = 0;
  double mean_local_acc = 0;
  double client_variance = 0;
  double external_acc = 0;
  double class_variance = 0;
};

/// Parses "18,0.8T,29": plain integers are rounds, a trailing T scales by `rounds`.
std::vector<std::size_t> parse_aug_starts(const std::string& list, std::size_t rounds);

/// One fed_zdac run per (start, seed), in start-major order.
std::vector<SweepRow> sweep_aug_start(const ExperimentConfig& cfg, const LoadedData& data,
                                      std::span<const std::size_t> starts);
std::string sweep_csv(const std::vector<SweepRow>& rows);

struct AuditSets {
  std::vector<Dataset> a;
  std::vector<Dataset> b;
};

/// Toy client sets for the audit: the differing client holds classes {0,1}
/// (set A) or {2,3} (set B, unless audit.identical); shared clients draw all
/// classes.
AuditSets audit_client_sets(const ExperimentConfig& cfg);
/// AuditConfig from the audit section, the zsdg section and the first seed.
AuditConfig audit_config(const ExperimentConfig& cfg);

/// Shortest round-trip decimal text for a double.
std::string format_number(double v);

}  // namespace fedzda
