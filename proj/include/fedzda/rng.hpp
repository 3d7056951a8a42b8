#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <utility>

namespace fedzda {

/// Mixes a base seed with a list of keys (round, client, purpose, ...) into an
/// independent stream seed. SplitMix64 finalizer per step.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys);

// Stream purposes used with derive_seed.
enum class Stream : std::uint64_t {
  init = 1,
  sampling = 2,
  local_train = 3,
  zsdg_client = 4,
  zsdg_server = 5,
  server_train = 6,
  partition = 7,
  bootstrap = 8,
  probe = 9,
};

inline std::uint64_t derive_seed(std::uint64_t base, Stream s,
                                 std::initializer_list<std::uint64_t> keys = {}) {
  std::uint64_t h = derive_seed(base, {static_cast<std::uint64_t>(s)});
  return keys.size() == 0 ? h : derive_seed(h, keys);
}

/// Seeded generator with platform-independent draws. The standard
/// distributions are implementation-defined, so uniform/normal/below are
/// computed here from the raw mt19937_64 output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (one draw per call).
  double normal();

  /// Uniform integer in [0, n). Unbiased (rejection on the top range).
  std::size_t below(std::size_t n);

  template <class It>
  void shuffle(It first, It last) {
    auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fedzda
