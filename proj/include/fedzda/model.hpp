#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedzda/ops.hpp"
#include "fedzda/tape.hpp"
#include "fedzda/tensor.hpp"

namespace fedzda {

/// mnist_cnn and cifar_cnn follow the published layer lists; toy_cnn is a
/// one-conv network used for fast tests and audits.
enum class Architecture : std::uint32_t { mnist_cnn = 1, cifar_cnn = 2, toy_cnn = 3 };

std::string_view to_string(Architecture a);
/// Throws ConfigError for unknown names.
Architecture parse_architecture(std::string_view name);

struct ArchitectureSpec {
  Architecture arch = Architecture::mnist_cnn;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t classes = 10;

  /// Canonical input shape and class count for the architecture.
  static ArchitectureSpec defaults(Architecture a);
  void validate() const;
  bool operator==(const ArchitectureSpec&) const = default;
};

inline constexpr double kDefaultBnMomentum = 0.1;

template <typename T>
struct BnStats {
  Tensor<T> mean;
  Tensor<T> var;
};

/// Batch statistics of every BN layer in network order, captured during a forward pass.
template <typename T>
struct BnTrace {
  std::vector<Var<T>> means;
  std::vector<Var<T>> vars;
};

/// Ordered layer list with parameters and BN running buffers.
///
/// Parameters are initialized fan-in-scaled uniform, U(−1/√fan_in, 1/√fan_in),
/// from a seed; BN gamma = 1, beta = 0, running mean 0, running variance 1.
/// Copying a Model yields an independent replica.
template <typename T>
class Model {
 public:
  static Model build(const ArchitectureSpec& spec, std::uint64_t seed,
                     T bn_momentum = static_cast<T>(kDefaultBnMomentum));

  const ArchitectureSpec& spec() const noexcept { return spec_; }
  std::uint64_t seed() const noexcept { return seed_; }
  T bn_momentum() const noexcept { return momentum_; }
  void set_bn_momentum(T m) { momentum_ = m; }

  /// Eval or probe pass; parameters enter the tape as constants and nothing
  /// in the model changes. Train mode is rejected here (use forward_train).
  Var<T> forward(Tape<T>& tape, Var<T> input, ops::BnMode mode,
                 BnTrace<T>* trace = nullptr) const;
  /// Train-mode pass: parameters are gradient leaves and BN running buffers
  /// absorb the batch statistics.
  Var<T> forward_train(Tape<T>& tape, Var<T> input, BnTrace<T>* trace = nullptr);

  /// Eval-mode logits without recording gradients.
  Tensor<T> logits(const Tensor<T>& inputs) const;
  /// Eval-mode class probabilities; rows sum to one.
  Tensor<T> predict(const Tensor<T>& inputs) const;
  std::vector<int> classify(const Tensor<T>& inputs) const;

  std::vector<Tensor<T>>& parameters() noexcept { return params_; }
  const std::vector<Tensor<T>>& parameters() const noexcept { return params_; }
  const std::vector<std::string>& parameter_names() const noexcept { return names_; }
  std::size_t parameter_count() const;
  std::vector<T> flatten_parameters() const;
  void unflatten_parameters(std::span<const T> flat);

  std::size_t bn_layer_count() const noexcept { return bn_.size(); }
  /// Copies of (running mean, running variance) in network order.
  std::vector<BnStats<T>> bn_stats() const { return bn_; }
  std::vector<BnStats<T>>& bn_buffers() noexcept { return bn_; }
  const std::vector<BnStats<T>>& bn_buffers() const noexcept { return bn_; }
  void set_bn_stats(const std::vector<BnStats<T>>& stats);

  void set_requires_grad(bool on);
  void zero_grad();

  bool same_architecture(const Model& other) const;
  /// FNV-1a over the raw bytes of parameters and BN buffers.
  std::uint64_t fingerprint() const;

 private:
  enum class LayerKind { conv, batchnorm, relu, maxpool, flatten, dense };
  struct Layer {
    LayerKind kind;
    std::size_t param = 0;  // first parameter index (weight/gamma)
    std::size_t bn = 0;     // BN buffer index
    std::size_t stride = 1;
    std::size_t padding = 0;
  };

  void add_conv(std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t padding);
  void add_bn(std::size_t channels);
  void add_dense(std::size_t in, std::size_t out);
  void add_simple(LayerKind kind);
  void check_input(const Tensor<T>& input) const;

  template <class ParamFn>
  Var<T> run(Tape<T>& tape, Var<T> x, ops::BnMode mode, BnTrace<T>* trace, ParamFn&& param,
             std::vector<BnStats<T>>* running) const;

  ArchitectureSpec spec_;
  std::uint64_t seed_ = 0;
  T momentum_ = static_cast<T>(kDefaultBnMomentum);
  std::vector<Layer> layers_;
  std::vector<Tensor<T>> params_;
  std::vector<std::string> names_;
  std::vector<BnStats<T>> bn_;
};

extern template class Model<float>;
extern template class Model<double>;

/// Element-type conversion of a whole model (parameters and BN buffers).
template <typename To, typename From>
Model<To> convert_model(const Model<From>& m);

}  // namespace fedzda
