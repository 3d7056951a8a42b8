#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedzda/dataset.hpp"
#include "fedzda/model.hpp"

namespace fedzda {

enum class ZsdgOptimizer { adam, sgd };

std::string to_string(ZsdgOptimizer o);
ZsdgOptimizer parse_zsdg_optimizer(const std::string& name);

struct ZsdgConfig {
  std::size_t iterations = 500;  ///< J; 0 returns the initial draw
  double step_size = 0.05;
  std::size_t per_class = 10;  ///< B_n
  ZsdgOptimizer optimizer = ZsdgOptimizer::adam;
  double init_mean = 0.5;
  double init_std = 0.25;
  double lambda_bn = 1.0;
  double lambda_ce = 1.0;
  double clamp_min = 0.0;
  double clamp_max = 1.0;

  /// Throws ConfigError naming the field. A zero per-class quota is accepted
  /// only when allow_empty is set (protocols treat it as "no augmentation").
  void validate(bool allow_empty = false) const;
};

struct ZsdgLossBreakdown {
  double total = 0;
  double bn = 0;  ///< Σ_ℓ ‖μ̄_ℓ − μ_ℓ‖² + ‖σ̄²_ℓ − σ²_ℓ‖², unweighted
  double ce = 0;  ///< mean cross-entropy against the targets, unweighted
};

template <typename T>
struct ZsdgLoss {
  Var<T> total;
  ZsdgLossBreakdown breakdown;
};

/// Records the matching loss for inputs x on `tape`. The model runs in probe
/// mode: batch statistics normalize the pass and are compared against the
/// stored running mean and variance of every BN layer. Nothing in the model
/// changes. Throws ConfigError when a BN layer sees fewer than two values per
/// channel.
template <typename T>
ZsdgLoss<T> zsdg_loss(Tape<T>& tape, const Model<T>& model, Var<T> x, std::span<const int> targets,
                      double lambda_bn = 1.0, double lambda_ce = 1.0);

/// Value-only convenience wrapper.
template <typename T>
ZsdgLossBreakdown zsdg_loss_value(const Model<T>& model, const Tensor<T>& x,
                                  std::span<const int> targets, double lambda_bn = 1.0,
                                  double lambda_ce = 1.0);

/// Labeled synthetic inputs, grouped by source model and then by class.
template <typename T>
struct SyntheticBatch {
  std::size_t classes = 0;
  Tensor<T> images;                  ///< [M, C, H, W]
  std::vector<int> labels;           ///< class-major within each source
  std::vector<std::size_t> source;   ///< generating-model index per sample
  /// Per source model: loss before the first and after the last step.
  std::vector<ZsdgLossBreakdown> initial_loss;
  std::vector<ZsdgLossBreakdown> final_loss;
  /// Total loss before each step, for the first source.
  std::vector<double> loss_history;
  /// Mean cross-entropy per class at the end (averaged over sources).
  std::vector<double> class_loss;

  std::size_t size() const noexcept { return labels.size(); }
  /// One-hot [M, classes] targets.
  Tensor<T> one_hot() const;
  /// Float copy suitable for mixing with real data.
  Dataset to_dataset() const;
  std::vector<std::size_t> class_counts() const;
};

/// Draws per_class·N inputs from the clamped Gaussian init and optimizes them
/// for `iterations` steps on zsdg_loss with gradients w.r.t. the inputs only.
/// All classes share one batch, so BN statistics are matched by the whole
/// synthetic set. Non-finite values abort with NumericError naming the
/// iteration.
template <typename T>
SyntheticBatch<T> generate(const Model<T>& model, const ZsdgConfig& cfg, std::uint64_t seed);

/// An equal per-class quota from every model (model i seeded with
/// derive_seed(seed, {i})), concatenated in model order and tagged by source.
template <typename T>
SyntheticBatch<T> generate_balanced(std::span<const Model<T>* const> models, std::size_t per_class,
                                    const ZsdgConfig& cfg, std::uint64_t seed);

}  // namespace fedzda
