#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fedzda/errors.hpp"
#include "fedzda/rng.hpp"
#include "fedzda/simd/kernels.hpp"

namespace fs = fedzda::simd;
using fedzda::Rng;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform() * 2 - 1);
  return v;
}

// Triple loop in long double.
template <typename T>
std::vector<long double> naive_gemm(std::size_t m, std::size_t n, std::size_t k, const std::vector<T>& a,
                                    const std::vector<T>& b, const std::vector<T>& c0, bool acc) {
  std::vector<long double> c(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double s = acc ? c0[i * n + j] : 0;
      for (std::size_t p = 0; p < k; ++p) s += static_cast<long double>(a[i * k + p]) * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

template <typename T>
class SimdKernels : public ::testing::Test {};
using Types = ::testing::Types<float, double>;
TYPED_TEST_SUITE(SimdKernels, Types);

template <typename T>
double tol() {
  return std::is_same_v<T, float> ? 1e-5 : 1e-13;
}

TYPED_TEST(SimdKernels, GemmMatchesNaiveOracleOnOddShapes) {
  using T = TypeParam;
  Rng rng(7);
  const std::size_t dims[][3] = {{1, 1, 1}, {3, 5, 7}, {8, 8, 8}, {17, 9, 33}, {4, 67, 25}, {31, 2, 1}};
  for (auto& d : dims) {
    const std::size_t m = d[0], n = d[1], k = d[2];
    auto a = random_vec<T>(m * k, rng), b = random_vec<T>(k * n, rng), c0 = random_vec<T>(m * n, rng);
    for (bool acc : {false, true}) {
      auto oracle = naive_gemm(m, n, k, a, b, c0, acc);
      for (auto be : {fs::Backend::scalar, fs::Backend::avx2}) {
        if (!fs::backend_available(be)) continue;
        fs::set_backend(be);
        auto c = c0;
        fs::gemm<T>(m, n, k, a.data(), k, b.data(), n, c.data(), n, acc);
        for (std::size_t i = 0; i < c.size(); ++i)
          ASSERT_NEAR(static_cast<double>(c[i]), static_cast<double>(oracle[i]), tol<T>() * (1 + k))
              << "backend " << fs::to_string(be) << " m=" << m << " n=" << n << " k=" << k;
      }
    }
  }
  fs::set_backend(fs::backend_available(fs::Backend::avx2) ? fs::Backend::avx2 : fs::Backend::scalar);
}

TYPED_TEST(SimdKernels, GemmHonorsLeadingDimensions) {
  using T = TypeParam;
  Rng rng(3);
  const std::size_t m = 5, n = 6, k = 4, lda = 9, ldb = 11, ldc = 13;
  auto a = random_vec<T>(m * lda, rng), b = random_vec<T>(k * ldb, rng);
  std::vector<T> c(m * ldc, T{42});
  fs::gemm<T>(m, n, k, a.data(), lda, b.data(), ldb, c.data(), ldc, false);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += static_cast<long double>(a[i * lda + p]) * b[p * ldb + j];
      EXPECT_NEAR(static_cast<double>(c[i * ldc + j]), static_cast<double>(s), tol<T>() * 8);
    }
    for (std::size_t j = n; j < ldc; ++j) EXPECT_EQ(c[i * ldc + j], T{42});
  }
}

TYPED_TEST(SimdKernels, BackendsAgreeOnAxpyAndDot) {
  using T = TypeParam;
  if (!fs::backend_available(fs::Backend::avx2)) GTEST_SKIP() << "no AVX2 on this host";
  Rng rng(11);
  for (std::size_t n : {0u, 1u, 7u, 8u, 15u, 16u, 33u, 1000u}) {
    auto x = random_vec<T>(n, rng), y = random_vec<T>(n, rng);
    auto ys = y, yv = y;
    const T alpha = static_cast<T>(0.37);
    fs::scalar::axpy<T>(n, alpha, x.data(), ys.data());
    fs::avx2::axpy<T>(n, alpha, x.data(), yv.data());
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(ys[i], yv[i], tol<T>());
    long double exact = 0;
    for (std::size_t i = 0; i < n; ++i) exact += static_cast<long double>(x[i]) * y[i];
    EXPECT_NEAR(static_cast<double>(fs::scalar::dot<T>(n, x.data(), y.data())), static_cast<double>(exact),
                tol<T>() * (1 + n));
    EXPECT_NEAR(static_cast<double>(fs::avx2::dot<T>(n, x.data(), y.data())), static_cast<double>(exact),
                tol<T>() * (1 + n));
  }
}

TYPED_TEST(SimdKernels, TransposeIsExact) {
  using T = TypeParam;
  Rng rng(5);
  const std::size_t rows = 19, cols = 37;
  auto in = random_vec<T>(rows * cols, rng);
  std::vector<T> out(rows * cols), back(rows * cols);
  fs::transpose<T>(rows, cols, in.data(), out.data());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) EXPECT_EQ(out[j * rows + i], in[i * cols + j]);
  fs::transpose<T>(cols, rows, out.data(), back.data());
  EXPECT_EQ(back, in);
}

TEST(SimdDispatch, ScalarAlwaysAvailable) {
  EXPECT_TRUE(fs::backend_available(fs::Backend::scalar));
  const auto prev = fs::active_backend();
  fs::set_backend(fs::Backend::scalar);
  EXPECT_EQ(fs::active_backend(), fs::Backend::scalar);
  fs::set_backend(prev);
  EXPECT_EQ(fs::to_string(fs::Backend::avx2), "avx2");
}

TEST(SimdDispatch, UnavailableBackendThrows) {
  if (fs::backend_available(fs::Backend::avx2)) GTEST_SKIP() << "AVX2 present";
  EXPECT_THROW(fs::set_backend(fs::Backend::avx2), fedzda::ConfigError);
}

}  // namespace
