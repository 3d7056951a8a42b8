#pragma once

// Model checkpoint blob, version 1. All integers and floats little-endian.
//
//   offset  type       field
//   0       char[8]    magic "FZDACKPT"
//   8       u32        format version (1)
//   12      u32        architecture id (1 mnist_cnn, 2 cifar_cnn, 3 toy_cnn)
//   16      u32        scalar width in bytes (4 float32, 8 float64)
//   20      u64        initialization seed
//   28      u32 x4     input channels, height, width, class count
//   44      f64        BN momentum
//   52      u32        parameter tensor count P, then per tensor: u32 rank, u32 extents[rank]
//   ...     u32        BN layer count L, then per layer: u32 channel count
//   ...     scalar[]   flat parameter vector (network order, row-major)
//   ...     scalar[]   per BN layer: running mean[C] then running variance[C]
//
// A blob written from Model<T> and read back into Model<T> reproduces the
// model bit-exactly; reading into the other precision converts values.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedzda/model.hpp"

namespace fedzda {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::vector<std::uint8_t> serialize_model(const Model<T>& model);

/// Throws ParseError on malformed or truncated input.
template <typename T>
Model<T> deserialize_model(const std::vector<std::uint8_t>& blob);

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path);

template <typename T>
Model<T> load_model(const std::filesystem::path& path);

}  // namespace fedzda
