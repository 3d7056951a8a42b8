#include <immintrin.h>

#include <cmath>

#include "fedzda/simd/kernels.hpp"

namespace fedzda::simd::avx2 {

namespace {

struct VecF {
  using T = float;
  using V = __m256;
  static constexpr std::size_t width = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V load(const T* p) { return _mm256_loadu_ps(p); }
  static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
  static V set1(T x) { return _mm256_set1_ps(x); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static T hsum(V v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    lo = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, lo);
    return _mm_cvtss_f32(_mm_add_ss(lo, sh));
  }
};

struct VecD {
  using T = double;
  using V = __m256d;
  static constexpr std::size_t width = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V load(const T* p) { return _mm256_loadu_pd(p); }
  static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
  static V set1(T x) { return _mm256_set1_pd(x); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static T hsum(V v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
  }
};

// 4 rows x 2 vectors of C held in registers for the whole k loop.
template <class V>
inline void block_4x2(std::size_t k, const typename V::T* a, std::size_t lda,
                      const typename V::T* b, std::size_t ldb, typename V::T* c, std::size_t ldc,
                      bool accumulate) {
  constexpr std::size_t W = V::width;
  typename V::V c00, c01, c10, c11, c20, c21, c30, c31;
  if (accumulate) {
    c00 = V::load(c), c01 = V::load(c + W);
    c10 = V::load(c + ldc), c11 = V::load(c + ldc + W);
    c20 = V::load(c + 2 * ldc), c21 = V::load(c + 2 * ldc + W);
    c30 = V::load(c + 3 * ldc), c31 = V::load(c + 3 * ldc + W);
  } else {
    c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = V::zero();
  }
  for (std::size_t p = 0; p < k; ++p) {
    const auto b0 = V::load(b + p * ldb);
    const auto b1 = V::load(b + p * ldb + W);
    auto a0 = V::set1(a[p]);
    c00 = V::fmadd(a0, b0, c00);
    c01 = V::fmadd(a0, b1, c01);
    auto a1 = V::set1(a[lda + p]);
    c10 = V::fmadd(a1, b0, c10);
    c11 = V::fmadd(a1, b1, c11);
    auto a2 = V::set1(a[2 * lda + p]);
    c20 = V::fmadd(a2, b0, c20);
    c21 = V::fmadd(a2, b1, c21);
    auto a3 = V::set1(a[3 * lda + p]);
    c30 = V::fmadd(a3, b0, c30);
    c31 = V::fmadd(a3, b1, c31);
  }
  V::store(c, c00), V::store(c + W, c01);
  V::store(c + ldc, c10), V::store(c + ldc + W, c11);
  V::store(c + 2 * ldc, c20), V::store(c + 2 * ldc + W, c21);
  V::store(c + 3 * ldc, c30), V::store(c + 3 * ldc + W, c31);
}

template <class V>
inline void block_1x2(std::size_t k, const typename V::T* a, const typename V::T* b,
                      std::size_t ldb, typename V::T* c, bool accumulate) {
  constexpr std::size_t W = V::width;
  auto c0 = accumulate ? V::load(c) : V::zero();
  auto c1 = accumulate ? V::load(c + W) : V::zero();
  for (std::size_t p = 0; p < k; ++p) {
    auto av = V::set1(a[p]);
    c0 = V::fmadd(av, V::load(b + p * ldb), c0);
    c1 = V::fmadd(av, V::load(b + p * ldb + W), c1);
  }
  V::store(c, c0), V::store(c + W, c1);
}

template <class V>
inline void block_1x1(std::size_t k, const typename V::T* a, const typename V::T* b,
                      std::size_t ldb, typename V::T* c, bool accumulate) {
  auto c0 = accumulate ? V::load(c) : V::zero();
  for (std::size_t p = 0; p < k; ++p) c0 = V::fmadd(V::set1(a[p]), V::load(b + p * ldb), c0);
  V::store(c, c0);
}

template <class V>
void gemm_impl(std::size_t m, std::size_t n, std::size_t k, const typename V::T* a,
               std::size_t lda, const typename V::T* b, std::size_t ldb, typename V::T* c,
               std::size_t ldc, bool accumulate) {
  using T = typename V::T;
  constexpr std::size_t W = V::width;
  std::size_t j = 0;
  for (; j + 2 * W <= n; j += 2 * W) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4)
      block_4x2<V>(k, a + i * lda, lda, b + j, ldb, c + i * ldc + j, ldc, accumulate);
    for (; i < m; ++i) block_1x2<V>(k, a + i * lda, b + j, ldb, c + i * ldc + j, accumulate);
  }
  for (; j + W <= n; j += W)
    for (std::size_t i = 0; i < m; ++i)
      block_1x1<V>(k, a + i * lda, b + j, ldb, c + i * ldc + j, accumulate);
  for (; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) {
      T s = accumulate ? c[i * ldc + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) s = std::fma(a[i * lda + p], b[p * ldb + j], s);
      c[i * ldc + j] = s;
    }
  }
}

template <class V>
void axpy_impl(std::size_t n, typename V::T alpha, const typename V::T* x, typename V::T* y) {
  constexpr std::size_t W = V::width;
  const auto av = V::set1(alpha);
  std::size_t i = 0;
  for (; i + W <= n; i += W) V::store(y + i, V::fmadd(av, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

template <class V>
typename V::T dot_impl(std::size_t n, const typename V::T* x, const typename V::T* y) {
  constexpr std::size_t W = V::width;
  auto s0 = V::zero(), s1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * W <= n; i += 2 * W) {
    s0 = V::fmadd(V::load(x + i), V::load(y + i), s0);
    s1 = V::fmadd(V::load(x + i + W), V::load(y + i + W), s1);
  }
  for (; i + W <= n; i += W) s0 = V::fmadd(V::load(x + i), V::load(y + i), s0);
  typename V::T s = V::hsum(s0) + V::hsum(s1);
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

}  // namespace

template <>
void gemm<float>(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                 const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  gemm_impl<VecF>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
template <>
void gemm<double>(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm_impl<VecD>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
template <>
void axpy<float>(std::size_t n, float alpha, const float* x, float* y) {
  axpy_impl<VecF>(n, alpha, x, y);
}
template <>
void axpy<double>(std::size_t n, double alpha, const double* x, double* y) {
  axpy_impl<VecD>(n, alpha, x, y);
}
template <>
float dot<float>(std::size_t n, const float* x, const float* y) {
  return dot_impl<VecF>(n, x, y);
}
template <>
double dot<double>(std::size_t n, const double* x, const double* y) {
  return dot_impl<VecD>(n, x, y);
}

}  // namespace fedzda::simd::avx2
