#pragma once

// Dense arithmetic kernels behind the tensor ops. Every kernel has a scalar
// reference version and, on x86-64, an AVX2+FMA version. The active backend is
// picked once at startup from CPUID and can be forced with FEDZDA_SIMD=scalar
// or set_backend().
//
// Summation order: gemm accumulates each output element over k sequentially in
// both backends; the AVX2 path differs from the scalar path only by FMA
// rounding. dot uses lane-parallel partial sums in AVX2.

#include <cstddef>
#include <string_view>

namespace fedzda::simd {

enum class Backend { scalar, avx2 };

std::string_view to_string(Backend b);
bool backend_available(Backend b);
Backend active_backend();
/// Throws ConfigError if the backend is not available on this CPU/build.
void set_backend(Backend b);

/// C[m×n] = A[m×k]·B[k×n] (+ C when accumulate). Row-major with leading dimensions.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

/// y += alpha·x
template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y);

template <typename T>
T dot(std::size_t n, const T* x, const T* y);

/// out[j×rows + i] = in[i×cols + j]
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out);

namespace scalar {
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate);
template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y);
template <typename T>
T dot(std::size_t n, const T* x, const T* y);
}  // namespace scalar

#if defined(FEDZDA_HAVE_AVX2)
namespace avx2 {
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate);
template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y);
template <typename T>
T dot(std::size_t n, const T* x, const T* y);
}  // namespace avx2
#endif

}  // namespace fedzda::simd
