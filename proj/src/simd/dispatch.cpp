#include <atomic>
#include <cstdlib>
#include <cstring>

#include "fedzda/errors.hpp"
#include "fedzda/simd/kernels.hpp"

namespace fedzda::simd {

namespace {

bool cpu_has_avx2() {
#if defined(FEDZDA_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend detect() {
  const char* forced = std::getenv("FEDZDA_SIMD");
  if (forced && std::strcmp(forced, "scalar") == 0) return Backend::scalar;
  return cpu_has_avx2() ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend>& current() {
  static std::atomic<Backend> b{detect()};
  return b;
}

}  // namespace

std::string_view to_string(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

bool backend_available(Backend b) { return b == Backend::scalar || cpu_has_avx2(); }

Backend active_backend() { return current().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
  if (!backend_available(b))
    throw ConfigError("SIMD backend '" + std::string(to_string(b)) + "' is not available");
  current().store(b, std::memory_order_relaxed);
}

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
#if defined(FEDZDA_HAVE_AVX2)
  if (active_backend() == Backend::avx2) return avx2::gemm(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
#endif
  scalar::gemm(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
#if defined(FEDZDA_HAVE_AVX2)
  if (active_backend() == Backend::avx2) return avx2::axpy(n, alpha, x, y);
#endif
  scalar::axpy(n, alpha, x, y);
}

template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
#if defined(FEDZDA_HAVE_AVX2)
  if (active_backend() == Backend::avx2) return avx2::dot(n, x, y);
#endif
  return scalar::dot(n, x, y);
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
  constexpr std::size_t tile = 16;
  for (std::size_t i0 = 0; i0 < rows; i0 += tile)
    for (std::size_t j0 = 0; j0 < cols; j0 += tile)
      for (std::size_t i = i0; i < rows && i < i0 + tile; ++i)
        for (std::size_t j = j0; j < cols && j < j0 + tile; ++j) out[j * rows + i] = in[i * cols + j];
}

template void gemm<float>(std::size_t, std::size_t, std::size_t, const float*, std::size_t,
                          const float*, std::size_t, float*, std::size_t, bool);
template void gemm<double>(std::size_t, std::size_t, std::size_t, const double*, std::size_t,
                           const double*, std::size_t, double*, std::size_t, bool);
template void axpy<float>(std::size_t, float, const float*, float*);
template void axpy<double>(std::size_t, double, const double*, double*);
template float dot<float>(std::size_t, const float*, const float*);
template double dot<double>(std::size_t, const double*, const double*);
template void transpose<float>(std::size_t, std::size_t, const float*, float*);
template void transpose<double>(std::size_t, std::size_t, const double*, double*);

}  // namespace fedzda::simd
