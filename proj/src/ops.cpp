#include "fedzda/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "fedzda/errors.hpp"
#include "fedzda/simd/kernels.hpp"

namespace fedzda::ops {

namespace {

template <typename T>
Tape<T>& tape_of(const Var<T>& v) {
  if (!v.attached()) throw UsageError("op input is not attached to a tape");
  return *v.tape();
}

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw UsageError("op inputs live on different tapes");
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank)
    throw DimensionError(std::string(what) + " must have rank " + std::to_string(rank) +
                         ", got shape " + shape_str(s));
}

// Reductions with eight independent partial sums, combined pairwise.
template <typename T>
T block_sum(const T* x, std::size_t n) {
  T a[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) a[l] += x[i + l];
  for (; i < n; ++i) a[i % 8] += x[i];
  return ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7]));
}

template <typename T>
T block_dot(const T* x, const T* y, std::size_t n) {
  T a[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) a[l] += x[i + l] * y[i + l];
  for (; i < n; ++i) a[i % 8] += x[i] * y[i];
  return ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7]));
}

template <typename T>
T block_sq_dev(const T* x, T mean, std::size_t n) {
  T a[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) a[l] += (x[i + l] - mean) * (x[i + l] - mean);
  for (; i < n; ++i) a[i % 8] += (x[i] - mean) * (x[i] - mean);
  return ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7]));
}

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t f, kh, kw;
  std::size_t stride, pad;
  std::size_t oh, ow;

  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

// Output columns [lo, hi) whose tap j lands inside an input row of extent `extent`.
inline void valid_range(std::size_t extent, std::size_t out, std::size_t stride, std::size_t pad,
                        std::size_t j, std::size_t& lo, std::size_t& hi) {
  // ox·stride + j − pad ∈ [0, extent)
  lo = j >= pad ? 0 : (pad - j + stride - 1) / stride;
  const std::size_t limit = extent + pad;  // ox·stride + j < limit
  hi = limit > j ? std::min(out, (limit - j - 1) / stride + 1) : 0;
  if (lo > hi) lo = hi;
}

// col[(ci·kh + i)·kw + j][oy·ow + ox] = image[ci][oy·s − pad + i][ox·s − pad + j], zero outside.
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::size_t P = g.p();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((ci * g.kh + i) * g.kw + j) * P;
        std::size_t lo, hi;
        valid_range(g.w, g.ow, g.stride, g.pad, j, lo, hi);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* src = image + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(dst, dst + lo, T{0});
          if (g.stride == 1 && lo < hi)
            std::copy(src + (lo + j - g.pad), src + (hi + j - g.pad), dst + lo);
          else
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + j - g.pad];
          std::fill(dst + hi, dst + g.ow, T{0});
        }
      }
}

// Adjoint of im2col: scatter-add columns back into the image gradient.
template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* image) {
  const std::size_t P = g.p();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((ci * g.kh + i) * g.kw + j) * P;
        std::size_t lo, hi;
        valid_range(g.w, g.ow, g.stride, g.pad, j, lo, hi);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = image + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + j - g.pad] += src[ox];
        }
      }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t padding) {
  Tape<T>& tape = tape_of(input);
  require_same_tape(input, weight);
  require_same_tape(input, bias);
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = weight.value();
  const Tensor<T>& b = bias.value();
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  if (stride == 0) throw ConfigError("conv2d stride must be positive");
  if (w.dim(1) != x.dim(1))
    throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()));
  if (b.size() != w.dim(0))
    throw DimensionError("conv2d bias has " + std::to_string(b.size()) + " entries for " +
                         std::to_string(w.dim(0)) + " filters");

  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                 stride, padding, 0, 0};
  const std::size_t ph = g.h + 2 * padding, pw = g.w + 2 * padding;
  if (g.kh > ph || g.kw > pw)
    throw DimensionError("conv2d kernel " + shape_str(w.shape()) + " exceeds padded input " +
                         std::to_string(ph) + "x" + std::to_string(pw));
  if ((ph - g.kh) % stride != 0 || (pw - g.kw) % stride != 0)
    throw ConfigError("conv2d output extent is not integral for input " + shape_str(x.shape()) +
                      ", kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                      ", stride " + std::to_string(stride) + ", padding " + std::to_string(padding));
  g.oh = (ph - g.kh) / stride + 1;
  g.ow = (pw - g.kw) / stride + 1;

  const std::size_t K = g.k(), P = g.p(), F = g.f;
  Tensor<T> out({g.n, F, g.oh, g.ow});
  std::vector<T> col(K * P);
  // Transposed columns kept for the weight gradient.
  auto cols = std::make_shared<std::vector<T>>();
  if (tape.needs_grad(weight)) cols->resize(g.n * P * K);
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, x.data().data() + n * g.c * g.h * g.w, col.data());
    if (!cols->empty()) simd::transpose<T>(K, P, col.data(), cols->data() + n * P * K);
    T* y = out.data().data() + n * F * P;
    simd::gemm<T>(F, P, K, w.data().data(), K, col.data(), P, y, P, false);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t p = 0; p < P; ++p) y[f * P + p] += b[f];
  }

  return tape.record("conv2d", std::move(out), {input, weight, bias},
                     [=](Tape<T>& t, std::span<const T> gy) {
                       const std::size_t K = g.k(), P = g.p(), F = g.f;
                       const bool gx = t.needs_grad(input), gw = t.needs_grad(weight),
                                  gb = t.needs_grad(bias);
                       const T* wv = t.value(weight).data().data();
                       std::vector<T> wT, dcol;
                       if (gx) {
                         wT.resize(K * F), dcol.resize(K * P);
                         simd::transpose<T>(F, K, wv, wT.data());
                       }
                       std::span<T> dx = gx ? t.grad(input) : std::span<T>();
                       std::span<T> dw = gw ? t.grad(weight) : std::span<T>();
                       std::span<T> db = gb ? t.grad(bias) : std::span<T>();
                       for (std::size_t n = 0; n < g.n; ++n) {
                         const T* dy = gy.data() + n * F * P;
                         if (gb)
                           for (std::size_t f = 0; f < F; ++f) db[f] += block_sum(dy + f * P, P);
                         if (gw)
                           simd::gemm<T>(F, K, P, dy, P, cols->data() + n * P * K, K, dw.data(), K,
                                         true);
                         if (gx) {
                           simd::gemm<T>(K, P, F, wT.data(), F, dy, P, dcol.data(), P, false);
                           col2im_add(g, dcol.data(), dx.data() + n * g.c * g.h * g.w);
                         }
                       }
                     });
}

template <typename T>
BatchNormOutput<T> batchnorm(Var<T> input, Var<T> gamma, Var<T> beta,
                             const Tensor<T>& running_mean, const Tensor<T>& running_var,
                             BnMode mode) {
  Tape<T>& tape = tape_of(input);
  require_same_tape(input, gamma);
  require_same_tape(input, beta);
  const Tensor<T>& x = input.value();
  if (x.rank() < 2) throw DimensionError("batchnorm input needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t S = N * C == 0 ? 0 : x.size() / (N * C);
  const std::size_t M = N * S;
  for (const Tensor<T>* p : {&gamma.value(), &beta.value(), &running_mean, &running_var})
    if (p->size() != C)
      throw DimensionError("batchnorm parameter has " + std::to_string(p->size()) +
                           " entries for " + std::to_string(C) + " channels");
  if (mode != BnMode::eval && M < 2)
    throw ConfigError("batch statistics need at least 2 values per channel, got " +
                      std::to_string(M));

  const T* xv = x.data().data();
  std::vector<T> mean(C, T{0}), var(C, T{0});
  if (M > 0) {
    for (std::size_t c = 0; c < C; ++c) {
      T s{0};
      for (std::size_t n = 0; n < N; ++n) s += block_sum(xv + (n * C + c) * S, S);
      mean[c] = s / static_cast<T>(M);
      T q{0};
      for (std::size_t n = 0; n < N; ++n) q += block_sq_dev(xv + (n * C + c) * S, mean[c], S);
      var[c] = q / static_cast<T>(M);
    }
  }

  const bool batch_norm = mode != BnMode::eval;
  const T eps = static_cast<T>(kBnEpsilon);
  std::vector<T> inv_std(C), shift(C);
  for (std::size_t c = 0; c < C; ++c) {
    const T v = batch_norm ? var[c] : running_var[c];
    inv_std[c] = T{1} / std::sqrt(v + eps);
    shift[c] = batch_norm ? mean[c] : running_mean[c];
  }

  const T* gv = gamma.value().data().data();
  const T* bv = beta.value().data().data();
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const T h = (xv[off + i] - shift[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = gv[c] * h + bv[c];
      }
    }

  Var<T> mean_var = tape.record(
      "batchnorm.mean", Tensor<T>({C}, mean), {input}, [=](Tape<T>& t, std::span<const T> g) {
        auto dx = t.grad(input);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const T d = g[c] / static_cast<T>(M);
            for (std::size_t i = 0; i < S; ++i) dx[(n * C + c) * S + i] += d;
          }
      });
  Var<T> var_var = tape.record(
      "batchnorm.var", Tensor<T>({C}, var), {input}, [=](Tape<T>& t, std::span<const T> g) {
        auto dx = t.grad(input);
        const T* xs = t.value(input).data().data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const T d = T{2} * g[c] / static_cast<T>(M);
            const std::size_t off = (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) dx[off + i] += d * (xs[off + i] - mean[c]);
          }
      });

  Var<T> out_var = tape.record(
      "batchnorm", std::move(out), {input, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::span<const T> g) {
        const bool gx = t.needs_grad(input), gg = t.needs_grad(gamma), gbeta = t.needs_grad(beta);
        std::vector<T> sum_dy(C, T{0}), sum_dy_xhat(C, T{0});
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * S;
            sum_dy[c] += block_sum(g.data() + off, S);
            sum_dy_xhat[c] += block_dot(g.data() + off, xhat.data() + off, S);
          }
        if (gg) {
          auto dg = t.grad(gamma);
          for (std::size_t c = 0; c < C; ++c) dg[c] += sum_dy_xhat[c];
        }
        if (gbeta) {
          auto dbeta = t.grad(beta);
          for (std::size_t c = 0; c < C; ++c) dbeta[c] += sum_dy[c];
        }
        if (!gx) return;
        auto dx = t.grad(input);
        const T* gam = t.value(gamma).data().data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * S;
            const T a = gam[c] * inv_std[c];
            if (batch_norm) {
              const T m = static_cast<T>(M);
              for (std::size_t i = 0; i < S; ++i)
                dx[off + i] += a / m * (m * g[off + i] - sum_dy[c] - xhat[off + i] * sum_dy_xhat[c]);
            } else {
              for (std::size_t i = 0; i < S; ++i) dx[off + i] += a * g[off + i];
            }
          }
      });

  return {out_var, mean_var, var_var};
}

template <typename T>
void update_running_stats(Tensor<T>& running_mean, Tensor<T>& running_var,
                          const Tensor<T>& batch_mean, const Tensor<T>& batch_var, T momentum) {
  if (running_mean.size() != batch_mean.size() || running_var.size() != batch_var.size())
    throw DimensionError("running statistics and batch statistics differ in size");
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = (T{1} - momentum) * running_mean[c] + momentum * batch_mean[c];
    running_var[c] = (T{1} - momentum) * running_var[c] + momentum * batch_var[c];
  }
}

template <typename T>
BatchNormOutput<T> batchnorm(Var<T> input, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                             Tensor<T>& running_var, BnMode mode, T momentum) {
  auto out = batchnorm(input, gamma, beta, static_cast<const Tensor<T>&>(running_mean),
                       static_cast<const Tensor<T>&>(running_var), mode);
  if (mode == BnMode::train)
    update_running_stats(running_mean, running_var, out.batch_mean.value(), out.batch_var.value(),
                         momentum);
  return out;
}

template <typename T>
Var<T> maxpool2(Var<T> input, PoolPadding padding) {
  Tape<T>& tape = tape_of(input);
  const Tensor<T>& x = input.value();
  require_rank(x.shape(), 4, "maxpool2 input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if ((H % 2 || W % 2) && padding == PoolPadding::error)
    throw ConfigError("maxpool2 needs even spatial extents, got " + shape_str(x.shape()));
  const std::size_t OH = (H + 1) / 2, OW = (W + 1) / 2;
  Tensor<T> out({N, C, OH, OW});
  std::vector<std::uint32_t> argmax(out.size());
  const T* xv = x.data().data();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox, ++o) {
        std::size_t best = base + 2 * oy * W + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t y = 2 * oy + dy, xx = 2 * ox + dx;
            if (y >= H || xx >= W) continue;
            const std::size_t idx = base + y * W + xx;
            if (xv[idx] > xv[best]) best = idx;
          }
        out[o] = xv[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
  }
  return tape.record("maxpool2", std::move(out), {input},
                     [input, argmax = std::move(argmax)](Tape<T>& t, std::span<const T> g) {
                       auto dx = t.grad(input);
                       for (std::size_t i = 0; i < g.size(); ++i) dx[argmax[i]] += g[i];
                     });
}

template <typename T>
Var<T> relu(Var<T> input) {
  Tape<T>& tape = tape_of(input);
  const Tensor<T>& x = input.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return tape.record("relu", std::move(out), {input}, [input](Tape<T>& t, std::span<const T> g) {
    auto dx = t.grad(input);
    const auto& xv = t.value(input);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += xv[i] > T{0} ? g[i] : T{0};
  });
}

template <typename T>
Var<T> flatten(Var<T> input) {
  Tape<T>& tape = tape_of(input);
  const Tensor<T>& x = input.value();
  if (x.rank() < 1) throw DimensionError("flatten needs a batch axis");
  const std::size_t N = x.dim(0);
  Tensor<T> out({N, N == 0 ? 0 : x.size() / N}, x.values());
  return tape.record("flatten", std::move(out), {input}, [input](Tape<T>& t, std::span<const T> g) {
    auto dx = t.grad(input);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias) {
  Tape<T>& tape = tape_of(input);
  require_same_tape(input, weight);
  require_same_tape(input, bias);
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = weight.value();
  const Tensor<T>& b = bias.value();
  require_rank(x.shape(), 2, "dense input");
  require_rank(w.shape(), 2, "dense weight");
  const std::size_t N = x.dim(0), D = x.dim(1), K = w.dim(1);
  if (w.dim(0) != D)
    throw DimensionError("dense inner dimensions disagree: input " + shape_str(x.shape()) +
                         ", weight " + shape_str(w.shape()));
  if (b.size() != K)
    throw DimensionError("dense bias has " + std::to_string(b.size()) + " entries for " +
                         std::to_string(K) + " outputs");
  Tensor<T> out({N, K});
  simd::gemm<T>(N, K, D, x.data().data(), D, w.data().data(), K, out.data().data(), K, false);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] += b[k];

  return tape.record("dense", std::move(out), {input, weight, bias},
                     [=](Tape<T>& t, std::span<const T> g) {
                       if (t.needs_grad(input)) {
                         std::vector<T> wT(K * D);
                         simd::transpose<T>(D, K, t.value(weight).data().data(), wT.data());
                         simd::gemm<T>(N, D, K, g.data(), K, wT.data(), D, t.grad(input).data(), D,
                                       true);
                       }
                       if (t.needs_grad(weight)) {
                         std::vector<T> xT(D * N);
                         simd::transpose<T>(N, D, t.value(input).data().data(), xT.data());
                         simd::gemm<T>(D, K, N, xT.data(), N, g.data(), K, t.grad(weight).data(), K,
                                       true);
                       }
                       if (t.needs_grad(bias)) {
                         auto db = t.grad(bias);
                         for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t k = 0; k < K; ++k) db[k] += g[n * K + k];
                       }
                     });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax input");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data().data() + n * K;
    T* q = p.data().data() + n * K;
    const T m = *std::max_element(z, z + K);
    T s{0};
    for (std::size_t k = 0; k < K; ++k) s += (q[k] = std::exp(z[k] - m));
    for (std::size_t k = 0; k < K; ++k) q[k] /= s;
  }
  return p;
}

namespace {

// Per-row log-sum-exp and softmax for the cross-entropy ops.
template <typename T>
void log_softmax_parts(const Tensor<T>& z, std::vector<T>& lse, Tensor<T>& probs) {
  const std::size_t N = z.dim(0), K = z.dim(1);
  lse.assign(N, T{0});
  probs = Tensor<T>(z.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = z.data().data() + n * K;
    const T m = *std::max_element(row, row + K);
    T s{0};
    for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - m);
    lse[n] = m + std::log(s);
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = std::exp(row[k] - lse[n]);
  }
}

}  // namespace

template <typename T>
Var<T> softmax_xent(Var<T> logits, std::span<const int> targets) {
  Tape<T>& tape = tape_of(logits);
  const Tensor<T>& z = logits.value();
  require_rank(z.shape(), 2, "softmax_xent logits");
  const std::size_t N = z.dim(0), K = z.dim(1);
  if (K < 2) throw ConfigError("softmax_xent needs at least 2 classes");
  if (N == 0) throw DimensionError("softmax_xent on an empty batch");
  if (targets.size() != N)
    throw DimensionError("softmax_xent got " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(N) + " rows");
  std::vector<int> tgt(targets.begin(), targets.end());
  for (int c : tgt)
    if (c < 0 || static_cast<std::size_t>(c) >= K)
      throw ConfigError("class index " + std::to_string(c) + " out of range [0, " +
                        std::to_string(K) + ")");
  std::vector<T> lse;
  Tensor<T> probs;
  log_softmax_parts(z, lse, probs);
  T loss{0};
  for (std::size_t n = 0; n < N; ++n) loss += lse[n] - z[n * K + static_cast<std::size_t>(tgt[n])];
  loss /= static_cast<T>(N);
  return tape.record("softmax_xent", Tensor<T>({}, {loss}), {logits},
                     [=, probs = std::move(probs)](Tape<T>& t, std::span<const T> g) {
                       auto dz = t.grad(logits);
                       const T s = g[0] / static_cast<T>(N);
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t k = 0; k < K; ++k) {
                           const T onehot = static_cast<std::size_t>(tgt[n]) == k ? T{1} : T{0};
                           dz[n * K + k] += s * (probs[n * K + k] - onehot);
                         }
                     });
}

template <typename T>
Var<T> softmax_xent(Var<T> logits, const Tensor<T>& targets) {
  Tape<T>& tape = tape_of(logits);
  const Tensor<T>& z = logits.value();
  require_rank(z.shape(), 2, "softmax_xent logits");
  if (targets.shape() != z.shape())
    throw DimensionError("softmax_xent targets " + shape_str(targets.shape()) + " vs logits " +
                         shape_str(z.shape()));
  const std::size_t N = z.dim(0), K = z.dim(1);
  if (K < 2) throw ConfigError("softmax_xent needs at least 2 classes");
  if (N == 0) throw DimensionError("softmax_xent on an empty batch");
  std::vector<T> lse;
  Tensor<T> probs;
  log_softmax_parts(z, lse, probs);
  T loss{0};
  std::vector<T> mass(N, T{0});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      const T tk = targets[n * K + k];
      if (tk != T{0}) loss -= tk * (z[n * K + k] - lse[n]);
      mass[n] += tk;
    }
  loss /= static_cast<T>(N);
  Tensor<T> tcopy = targets;
  return tape.record("softmax_xent", Tensor<T>({}, {loss}), {logits},
                     [=, probs = std::move(probs), tcopy = std::move(tcopy)](Tape<T>& t,
                                                                          std::span<const T> g) {
                       auto dz = t.grad(logits);
                       const T s = g[0] / static_cast<T>(N);
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t k = 0; k < K; ++k)
                           dz[n * K + k] += s * (probs[n * K + k] * mass[n] - tcopy[n * K + k]);
                     });
}

namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require_same_tape(a, b);
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return tape_of(a).record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, std::span<const T> g) {
    if (t.needs_grad(a)) simd::axpy<T>(g.size(), T{1}, g.data(), t.grad(a).data());
    if (t.needs_grad(b)) simd::axpy<T>(g.size(), T{1}, g.data(), t.grad(b).data());
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return tape_of(a).record("sub", std::move(out), {a, b}, [a, b](Tape<T>& t, std::span<const T> g) {
    if (t.needs_grad(a)) simd::axpy<T>(g.size(), T{1}, g.data(), t.grad(a).data());
    if (t.needs_grad(b)) simd::axpy<T>(g.size(), T{-1}, g.data(), t.grad(b).data());
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tape_of(a).record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, std::span<const T> g) {
    if (t.needs_grad(a)) {
      auto da = t.grad(a);
      const auto& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      auto db = t.grad(b);
      const auto& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  out.set_requires_grad(false);
  for (auto& v : out.data()) v *= factor;
  return tape_of(a).record("scale", std::move(out), {a}, [a, factor](Tape<T>& t, std::span<const T> g) {
    simd::axpy<T>(g.size(), factor, g.data(), t.grad(a).data());
  });
}

template <typename T>
Var<T> square(Var<T> a) {
  Tensor<T> out = a.value();
  out.set_requires_grad(false);
  for (auto& v : out.data()) v *= v;
  return tape_of(a).record("square", std::move(out), {a}, [a](Tape<T>& t, std::span<const T> g) {
    auto da = t.grad(a);
    const auto& av = t.value(a);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += T{2} * av[i] * g[i];
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().data()) s += v;
  return tape_of(a).record("sum", Tensor<T>({}, {s}), {a}, [a](Tape<T>& t, std::span<const T> g) {
    auto da = t.grad(a);
    for (auto& v : da) v += g[0];
  });
}

template <typename T>
Var<T> squared_distance(Var<T> a, const Tensor<T>& target) {
  const Tensor<T>& av = a.value();
  if (av.size() != target.size())
    throw DimensionError("squared_distance size mismatch: " + shape_str(av.shape()) + " vs " +
                         shape_str(target.shape()));
  std::vector<T> diff(av.size());
  T s{0};
  for (std::size_t i = 0; i < av.size(); ++i) {
    diff[i] = av[i] - target[i];
    s += diff[i] * diff[i];
  }
  return tape_of(a).record("squared_distance", Tensor<T>({}, {s}), {a},
                           [a, diff = std::move(diff)](Tape<T>& t, std::span<const T> g) {
                             auto da = t.grad(a);
                             for (std::size_t i = 0; i < diff.size(); ++i) da[i] += T{2} * diff[i] * g[0];
                           });
}

#define FEDZDA_INSTANTIATE_OPS(T)                                                               \
  template Var<T> conv2d<T>(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);                 \
  template BatchNormOutput<T> batchnorm<T>(Var<T>, Var<T>, Var<T>, const Tensor<T>&,            \
                                           const Tensor<T>&, BnMode);                           \
  template BatchNormOutput<T> batchnorm<T>(Var<T>, Var<T>, Var<T>, Tensor<T>&, Tensor<T>&,      \
                                           BnMode, T);                                          \
  template void update_running_stats<T>(Tensor<T>&, Tensor<T>&, const Tensor<T>&,               \
                                        const Tensor<T>&, T);                                   \
  template Var<T> maxpool2<T>(Var<T>, PoolPadding);                                             \
  template Var<T> relu<T>(Var<T>);                                                              \
  template Var<T> flatten<T>(Var<T>);                                                           \
  template Var<T> dense<T>(Var<T>, Var<T>, Var<T>);                                             \
  template Var<T> softmax_xent<T>(Var<T>, std::span<const int>);                                \
  template Var<T> softmax_xent<T>(Var<T>, const Tensor<T>&);                                    \
  template Var<T> add<T>(Var<T>, Var<T>);                                                       \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                       \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                       \
  template Var<T> scale<T>(Var<T>, T);                                                          \
  template Var<T> square<T>(Var<T>);                                                            \
  template Var<T> sum<T>(Var<T>);                                                               \
  template Var<T> squared_distance<T>(Var<T>, const Tensor<T>&);                                \
  template Tensor<T> softmax<T>(const Tensor<T>&);

FEDZDA_INSTANTIATE_OPS(float)
FEDZDA_INSTANTIATE_OPS(double)

}  // namespace fedzda::ops
