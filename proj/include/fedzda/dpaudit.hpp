#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedzda/dataset.hpp"
#include "fedzda/federation.hpp"
#include "fedzda/model.hpp"
#include "fedzda/zsdg.hpp"

namespace fedzda {

/// Equal-width bins over [lo, hi]; values at hi fall in the last bin.
struct BinSpec {
  double lo = 0;
  double hi = 1;
  std::size_t bins = 32;

  std::size_t index(double v) const;
  bool operator==(const BinSpec&) const = default;
};

/// Bins spanning the pooled range of two samples (a degenerate range is widened to width 1).
BinSpec pooled_bins(std::span<const double> a, std::span<const double> b, std::size_t bins = 32);
/// One bin per class id 0..classes−1.
BinSpec categorical_bins(std::size_t classes);

struct EmpiricalDistribution {
  BinSpec bins;
  std::vector<double> mass;     ///< sums to 1
  std::size_t count = 0;        ///< samples behind the histogram
  std::vector<double> samples;  ///< raw values when built from samples

  static EmpiricalDistribution from_samples(std::span<const double> samples, const BinSpec& bins);
  /// A known distribution with no samples attached; masses are normalized.
  static EmpiricalDistribution from_masses(std::vector<double> mass, const BinSpec& bins);
};

struct TvEstimate {
  double tv = 0;         ///< plug-in ½·Σ|p_b − q_b|
  double std_error = 0;  ///< bootstrap over both samples
  double null_mean = 0;  ///< mean plug-in TV after pooling and re-splitting the samples
  double debiased = 0;   ///< max(0, tv − null_mean)
};

/// Symmetric in its arguments bit-for-bit. Bootstrap and permutation draws are
/// seeded from the sample contents. Distributions without samples get zero
/// standard error and zero null mean. Throws ConfigError on differing bins.
TvEstimate estimate_tv(const EmpiricalDistribution& p, const EmpiricalDistribution& q, std::size_t resamples = 200);

/// Final-layer weight norm followed by the per-class mean logits over `probe`.
template <typename T>
std::vector<double> project_model(const Model<T>& model, const Tensor<T>& probe);

struct AuditConfig {
  ArchitectureSpec arch = ArchitectureSpec::defaults(Architecture::toy_cnn);
  std::size_t runs = 50;  ///< K per client set
  LocalTrainConfig train{2, 10, 0.05, 0.0};
  ZsdgConfig zsdg;
  /// Synthetic items per class mixed into the differing client during training.
  std::size_t quota = 0;
  /// Per-class quotas for the δ_data sweep.
  std::vector<std::size_t> quota_sweep{0, 10, 50};
  std::size_t bins = 32;
  std::size_t resamples = 200;
  std::size_t probe_size = 64;
  std::uint64_t seed = 1;

  void validate() const;
};

struct LinkVerdict {
  std::string name;
  double lhs = 0;
  double rhs = 0;
  double tolerance = 0;  ///< 2 combined standard errors
  bool pass = false;
};

struct AuditReport {
  std::size_t runs = 0;
  std::size_t clients = 0;
  /// δ_data at each sweep quota (label marginal of the augmented differing client).
  std::vector<std::size_t> quota_sweep;
  std::vector<TvEstimate> data_sweep;
  bool data_non_increasing = false;
  TvEstimate data;  ///< at the training quota
  /// Per projection coordinate.
  std::vector<TvEstimate> model_coords;
  std::vector<TvEstimate> agg_coords;
  TvEstimate model;  ///< coordinate with the largest debiased TV
  TvEstimate agg;
  std::vector<LinkVerdict> links;
  bool pass = false;
  std::string verdict;
  /// Raw projections [side][run][coordinate] for re-analysis.
  std::vector<std::vector<std::vector<double>>> model_samples;
  std::vector<std::vector<std::vector<double>>> agg_samples;
  std::string note;

  nlohmann::json to_json() const;
};

/// Two client sets that share C0 = a[1..] = b[1..] and differ in their first
/// client. For each set, K seed-varied runs train every client from a fresh
/// model, form W_agg = W_c/n + (n−1)/n · W_0 with W_0 the mean of the C0
/// models, and project W_c and W_agg. Throws ConfigError when K < 30 or the
/// sets do not share C0.
AuditReport audit_chain(std::span<const Dataset> a, std::span<const Dataset> b, const AuditConfig& cfg);

}  // namespace fedzda
