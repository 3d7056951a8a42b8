#pragma once

#include <cstddef>
#include <span>

#include "fedzda/tape.hpp"
#include "fedzda/tensor.hpp"

namespace fedzda::ops {

/// train: normalize with batch statistics and update running buffers.
/// eval: normalize with running buffers.
/// probe: normalize with batch statistics, running buffers untouched.
enum class BnMode { train, eval, probe };

/// Added to every variance before the square root, in BN and in the ZSDG loss.
inline constexpr double kBnEpsilon = 1e-5;

enum class PoolPadding { error, pad };

/// Cross-correlation of input[N,C,H,W] with weight[F,C,kH,kW] plus bias[F].
/// Output extent (H + 2·padding − kH)/stride + 1 must divide exactly.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride = 1,
              std::size_t padding = 0);

template <typename T>
struct BatchNormOutput {
  Var<T> output;
  Var<T> batch_mean;  ///< [C], population mean over N and spatial axes
  Var<T> batch_var;   ///< [C], biased (divide-by-M) variance
};

/// Batch normalization over input[N,C,...]. Both modes expose the statistics
/// of the current batch; only the normalization source differs. Nothing is
/// written to the running buffers here.
template <typename T>
BatchNormOutput<T> batchnorm(Var<T> input, Var<T> gamma, Var<T> beta,
                             const Tensor<T>& running_mean, const Tensor<T>& running_var,
                             BnMode mode);

/// As above, and in train mode also applies
/// running ← (1 − momentum)·running + momentum·batch.
template <typename T>
BatchNormOutput<T> batchnorm(Var<T> input, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                             Tensor<T>& running_var, BnMode mode, T momentum);

template <typename T>
void update_running_stats(Tensor<T>& running_mean, Tensor<T>& running_var,
                          const Tensor<T>& batch_mean, const Tensor<T>& batch_var, T momentum);

/// 2×2 window, stride 2. Ties go to the first element in row-major order.
template <typename T>
Var<T> maxpool2(Var<T> input, PoolPadding padding = PoolPadding::error);

template <typename T>
Var<T> relu(Var<T> input);

/// [N, ...] → [N, rest]
template <typename T>
Var<T> flatten(Var<T> input);

/// input[N,D]·weight[D,K] + bias[K]
template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias);

/// Mean over rows of −log softmax(logits)[target].
template <typename T>
Var<T> softmax_xent(Var<T> logits, std::span<const int> targets);

/// Soft or one-hot targets[N,K]: mean over rows of −Σ_k t_k log softmax_k.
template <typename T>
Var<T> softmax_xent(Var<T> logits, const Tensor<T>& targets);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
template <typename T>
Var<T> square(Var<T> a);
template <typename T>
Var<T> sum(Var<T> a);
/// ‖a − target‖² as a scalar
template <typename T>
Var<T> squared_distance(Var<T> a, const Tensor<T>& target);

/// Row-wise softmax of a [N,K] tensor, max-shifted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

}  // namespace fedzda::ops
