#include "fedzda/simd/kernels.hpp"

namespace fedzda::simd::scalar {

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = T{0};
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * lda + p];
      const T* brow = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
  T s{0};
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

template void gemm<float>(std::size_t, std::size_t, std::size_t, const float*, std::size_t,
                          const float*, std::size_t, float*, std::size_t, bool);
template void gemm<double>(std::size_t, std::size_t, std::size_t, const double*, std::size_t,
                           const double*, std::size_t, double*, std::size_t, bool);
template void axpy<float>(std::size_t, float, const float*, float*);
template void axpy<double>(std::size_t, double, const double*, double*);
template float dot<float>(std::size_t, const float*, const float*);
template double dot<double>(std::size_t, const double*, const double*);

}  // namespace fedzda::simd::scalar
