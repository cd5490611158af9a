#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "hello/tensor.hpp"

// Numeric kernels, two implementations each:
//
//   kernels::ref — plain serial loops, kept as the oracle the tests compare
//                  against and as the baseline for the kernel benchmark.
//   kernels::par — the OpenMP versions the library runs on.
//
// Every par kernel assigns each output element to exactly one thread and
// accumulates in a fixed order, so results are bit-identical for any thread
// count or schedule.

namespace hello::kernels {

// ---------------------------------------------------------------- reference

namespace ref {

// C(m,n) = alpha * op(A) * op(B) + beta * C, row-major.
// op(A) is A(m,k) when !ta, A^T of A(k,m) when ta; same for B.
template <class T>
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, int64_t lda, const T* b, int64_t ldb, T beta, T* c,
          int64_t ldc) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) {
        T av = ta ? a[p * lda + i] : a[i * lda + p];
        T bv = tb ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = alpha * acc + (beta == T(0) ? T(0) : beta * c[i * ldc + j]);
    }
  }
}

// Direct 7-loop convolution, stride s, zero padding p.
// x: (N,Ci,H,W)  w: (Co,Ci,kh,kw)  y: (N,Co,Ho,Wo)
template <class T>
void conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
            Tensor<T>& y) {
  int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo) {
          T acc = T(0);
          for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t h = ho * stride - pad + ky;
                int64_t ww = wo * stride - pad + kx;
                if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                acc += x.at4(n, ci, h, ww) * w.at4(co, ci, ky, kx);
              }
          y.at4(n, co, ho, wo) = acc;
        }
}

// 2x2 average pooling, stride 2. H and W must be even.
template <class T>
void avg_pool2(const Tensor<T>& x, Tensor<T>& y) {
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < H / 2; ++h)
        for (int64_t w = 0; w < W / 2; ++w) {
          T s = x.at4(n, c, 2 * h, 2 * w) + x.at4(n, c, 2 * h, 2 * w + 1) +
                x.at4(n, c, 2 * h + 1, 2 * w) + x.at4(n, c, 2 * h + 1, 2 * w + 1);
          y.at4(n, c, h, w) = s * T(0.25);
        }
}

// Row-wise softmax with temperature.
template <class T>
void softmax_rows(const T* in, T* out, int64_t rows, int64_t cols, T temp) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* xi = in + r * cols;
    T* yi = out + r * cols;
    T mx = xi[0] / temp;
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j] / temp);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      double e = std::exp(static_cast<double>(xi[j] / temp - mx));
      yi[j] = static_cast<T>(e);
      sum += e;
    }
    for (int64_t j = 0; j < cols; ++j) yi[j] = static_cast<T>(yi[j] / sum);
  }
}

}  // namespace ref

// ------------------------------------------------------------------- OpenMP

namespace par {

template <class T>
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, int64_t lda, const T* b, int64_t ldb, T beta, T* c,
          int64_t ldc) {
  if (!tb) {
    // ikj: the inner j loop is unit-stride in both B and C and vectorizes.
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
      T* ci = c + i * ldc;
      if (beta == T(0)) {
        for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
      } else {
        for (int64_t j = 0; j < n; ++j) ci[j] *= beta;
      }
      for (int64_t p = 0; p < k; ++p) {
        T av = alpha * (ta ? a[p * lda + i] : a[i * lda + p]);
        if (av == T(0)) continue;
        const T* bp = b + p * ldb;
        for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else {
    // B transposed: rows of A against rows of B, contiguous dot products.
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        const T* bj = b + j * ldb;
        T acc = T(0);
        if (!ta) {
          const T* ai = a + i * lda;
          for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
        } else {
          for (int64_t p = 0; p < k; ++p) acc += a[p * lda + i] * bj[p];
        }
        c[i * ldc + j] = alpha * acc + (beta == T(0) ? T(0) : beta * c[i * ldc + j]);
      }
    }
  }
}

// im2col for one image. x: (Ci,H,W) -> col: (Ci*kh*kw, Ho*Wo), row-major.
template <class T>
void im2col(const T* x, int64_t Ci, int64_t H, int64_t W, int64_t kh,
            int64_t kw, int stride, int pad, T* col) {
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  int64_t rows = Ci * kh * kw;
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    int64_t ci = r / (kh * kw);
    int64_t ky = (r / kw) % kh;
    int64_t kx = r % kw;
    T* dst = col + r * (Ho * Wo);
    const T* src = x + ci * H * W;
    for (int64_t ho = 0; ho < Ho; ++ho) {
      int64_t h = ho * stride - pad + ky;
      for (int64_t wo = 0; wo < Wo; ++wo) {
        int64_t w = wo * stride - pad + kx;
        dst[ho * Wo + wo] =
            (h < 0 || h >= H || w < 0 || w >= W) ? T(0) : src[h * W + w];
      }
    }
  }
}

// Adjoint of im2col: scatter col gradients back onto the image. Owner-computes
// over input pixels, so it is deterministic and race-free.
template <class T>
void col2im(const T* col, int64_t Ci, int64_t H, int64_t W, int64_t kh,
            int64_t kw, int stride, int pad, T* x) {
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
#pragma omp parallel for schedule(static)
  for (int64_t ci = 0; ci < Ci; ++ci) {
    T* dst = x + ci * H * W;
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        T acc = T(0);
        for (int64_t ky = 0; ky < kh; ++ky) {
          int64_t hp = h + pad - ky;
          if (hp % stride != 0) continue;
          int64_t ho = hp / stride;
          if (ho < 0 || ho >= Ho) continue;
          for (int64_t kx = 0; kx < kw; ++kx) {
            int64_t wp = w + pad - kx;
            if (wp % stride != 0) continue;
            int64_t wo = wp / stride;
            if (wo < 0 || wo >= Wo) continue;
            int64_t r = (ci * kh + ky) * kw + kx;
            acc += col[r * (Ho * Wo) + ho * Wo + wo];
          }
        }
        dst[h * W + w] = acc;
      }
  }
}

template <class T>
void avg_pool2(const Tensor<T>& x, Tensor<T>& y) {
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Ho = H / 2, Wo = W / 2;
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* src = x.ptr() + nc * H * W;
    T* dst = y.ptr() + nc * Ho * Wo;
    for (int64_t h = 0; h < Ho; ++h)
      for (int64_t w = 0; w < Wo; ++w) {
        dst[h * Wo + w] = (src[2 * h * W + 2 * w] + src[2 * h * W + 2 * w + 1] +
                           src[(2 * h + 1) * W + 2 * w] +
                           src[(2 * h + 1) * W + 2 * w + 1]) *
                          T(0.25);
      }
  }
}

template <class T>
void avg_pool2_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  int64_t N = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
  int64_t Ho = H / 2, Wo = W / 2;
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* src = dy.ptr() + nc * Ho * Wo;
    T* dst = dx.ptr() + nc * H * W;
    for (int64_t h = 0; h < Ho; ++h)
      for (int64_t w = 0; w < Wo; ++w) {
        T g = src[h * Wo + w] * T(0.25);
        dst[2 * h * W + 2 * w] = g;
        dst[2 * h * W + 2 * w + 1] = g;
        dst[(2 * h + 1) * W + 2 * w] = g;
        dst[(2 * h + 1) * W + 2 * w + 1] = g;
      }
  }
}

template <class T>
void relu(const T* x, T* y, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_backward(const T* x, const T* dy, T* dx, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
}

template <class T>
void softmax_rows(const T* in, T* out, int64_t rows, int64_t cols, T temp) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const T* xi = in + r * cols;
    T* yi = out + r * cols;
    T mx = xi[0] / temp;
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j] / temp);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      double e = std::exp(static_cast<double>(xi[j] / temp - mx));
      yi[j] = static_cast<T>(e);
      sum += e;
    }
    for (int64_t j = 0; j < cols; ++j) yi[j] = static_cast<T>(yi[j] / sum);
  }
}

// GroupNorm forward. x: (N,C,H,W), groups G with C % G == 0.
// Caches inverse stddev and normalized activations for the backward pass.
template <class T>
void group_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                const Tensor<T>& beta, int64_t G, T eps, Tensor<T>& y,
                Tensor<T>* xhat_cache, Tensor<T>* invstd_cache) {
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t cpg = C / G;
  int64_t m = cpg * H * W;
#pragma omp parallel for schedule(static)
  for (int64_t ng = 0; ng < N * G; ++ng) {
    int64_t n = ng / G, g = ng % G;
    const T* src = x.ptr() + (n * C + g * cpg) * H * W;
    T* dst = y.ptr() + (n * C + g * cpg) * H * W;
    double mean = 0.0;
    for (int64_t i = 0; i < m; ++i) mean += src[i];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      double d = src[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);
    T invstd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    if (invstd_cache) (*invstd_cache)[ng] = invstd;
    for (int64_t c = 0; c < cpg; ++c) {
      T ga = gamma[g * cpg + c];
      T be = beta[g * cpg + c];
      const T* s = src + c * H * W;
      T* d = dst + c * H * W;
      T* xh = xhat_cache ? xhat_cache->ptr() + (n * C + g * cpg + c) * H * W : nullptr;
      for (int64_t i = 0; i < H * W; ++i) {
        T norm = static_cast<T>((s[i] - mean) * invstd);
        if (xh) xh[i] = norm;
        d[i] = ga * norm + be;
      }
    }
  }
}

template <class T>
void group_norm_backward(const Tensor<T>& dy, const Tensor<T>& xhat,
                         const Tensor<T>& invstd, const Tensor<T>& gamma,
                         int64_t G, Tensor<T>& dx, Tensor<T>& dgamma,
                         Tensor<T>& dbeta) {
  int64_t N = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
  int64_t cpg = C / G;
  int64_t m = cpg * H * W;
  // Parameter grads: owner-computes per channel.
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < C; ++c) {
    double dg = 0.0, db = 0.0;
    for (int64_t n = 0; n < N; ++n) {
      const T* dyp = dy.ptr() + (n * C + c) * H * W;
      const T* xhp = xhat.ptr() + (n * C + c) * H * W;
      for (int64_t i = 0; i < H * W; ++i) {
        dg += static_cast<double>(dyp[i]) * xhp[i];
        db += dyp[i];
      }
    }
    dgamma[c] += static_cast<T>(dg);
    dbeta[c] += static_cast<T>(db);
  }
  // Input grads per (n, g) group.
#pragma omp parallel for schedule(static)
  for (int64_t ng = 0; ng < N * G; ++ng) {
    int64_t n = ng / G, g = ng % G;
    int64_t base = (n * C + g * cpg) * H * W;
    double sum_t = 0.0, sum_tx = 0.0;  // sums of dy*gamma and dy*gamma*xhat
    for (int64_t c = 0; c < cpg; ++c) {
      T ga = gamma[g * cpg + c];
      const T* dyp = dy.ptr() + base + c * H * W;
      const T* xhp = xhat.ptr() + base + c * H * W;
      for (int64_t i = 0; i < H * W; ++i) {
        double t = static_cast<double>(dyp[i]) * ga;
        sum_t += t;
        sum_tx += t * xhp[i];
      }
    }
    T istd = invstd[ng];
    double inv_m = 1.0 / static_cast<double>(m);
    for (int64_t c = 0; c < cpg; ++c) {
      T ga = gamma[g * cpg + c];
      const T* dyp = dy.ptr() + base + c * H * W;
      const T* xhp = xhat.ptr() + base + c * H * W;
      T* dxp = dx.ptr() + base + c * H * W;
      for (int64_t i = 0; i < H * W; ++i) {
        double t = static_cast<double>(dyp[i]) * ga;
        dxp[i] = static_cast<T>((t - inv_m * (sum_t + xhp[i] * sum_tx)) * istd);
      }
    }
  }
}

// Global average pool: (N,C,H,W) -> (N,C).
template <class T>
void global_avg_pool(const Tensor<T>& x, Tensor<T>& y) {
  int64_t N = x.dim(0), C = x.dim(1), m = x.dim(2) * x.dim(3);
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* src = x.ptr() + nc * m;
    double s = 0.0;
    for (int64_t i = 0; i < m; ++i) s += src[i];
    y[nc] = static_cast<T>(s / static_cast<double>(m));
  }
}

template <class T>
void global_avg_pool_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  int64_t N = dx.dim(0), C = dx.dim(1), m = dx.dim(2) * dx.dim(3);
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < N * C; ++nc) {
    T g = static_cast<T>(dy[nc] / static_cast<T>(m));
    T* dst = dx.ptr() + nc * m;
    for (int64_t i = 0; i < m; ++i) dst[i] = g;
  }
}

// L2 norms of matrix rows, accumulated in double.
template <class T>
void row_norms(const T* x, int64_t rows, int64_t cols, T* norms) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const T* xi = x + r * cols;
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) s += static_cast<double>(xi[j]) * xi[j];
    norms[r] = static_cast<T>(std::sqrt(s));
  }
}

}  // namespace par

// Bilinear resize with half-pixel centers and edge clamping; preserves
// constant images exactly. x: (C,H,W) -> y: (C,Ho,Wo). One implementation —
// it is not on the hot training path.
template <class T>
void bilinear_resize(const T* x, int64_t C, int64_t H, int64_t W, int64_t Ho,
                     int64_t Wo, T* y) {
  double sh = static_cast<double>(H) / static_cast<double>(Ho);
  double sw = static_cast<double>(W) / static_cast<double>(Wo);
  for (int64_t c = 0; c < C; ++c) {
    const T* src = x + c * H * W;
    T* dst = y + c * Ho * Wo;
    for (int64_t oy = 0; oy < Ho; ++oy) {
      double fy = (oy + 0.5) * sh - 0.5;
      int64_t y0 = static_cast<int64_t>(std::floor(fy));
      double wy = fy - y0;
      int64_t y0c = std::clamp<int64_t>(y0, 0, H - 1);
      int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, H - 1);
      for (int64_t ox = 0; ox < Wo; ++ox) {
        double fx = (ox + 0.5) * sw - 0.5;
        int64_t x0 = static_cast<int64_t>(std::floor(fx));
        double wx = fx - x0;
        int64_t x0c = std::clamp<int64_t>(x0, 0, W - 1);
        int64_t x1c = std::clamp<int64_t>(x0 + 1, 0, W - 1);
        double v00 = src[y0c * W + x0c], v01 = src[y0c * W + x1c];
        double v10 = src[y1c * W + x0c], v11 = src[y1c * W + x1c];
        double top = v00 + (v01 - v00) * wx;
        double bot = v10 + (v11 - v10) * wx;
        dst[oy * Wo + ox] = static_cast<T>(top + (bot - top) * wy);
      }
    }
  }
}

// Adjoint of bilinear_resize: scatters output-space gradients back to input
// space so that <resize(x), g> == <x, adjoint(g)> for all x, g.
template <class T>
void bilinear_resize_adjoint(const T* gy, int64_t C, int64_t Ho, int64_t Wo,
                             int64_t H, int64_t W, T* gx) {
  double sh = static_cast<double>(H) / static_cast<double>(Ho);
  double sw = static_cast<double>(W) / static_cast<double>(Wo);
  for (int64_t i = 0; i < C * H * W; ++i) gx[i] = T(0);
  for (int64_t c = 0; c < C; ++c) {
    const T* src = gy + c * Ho * Wo;
    T* dst = gx + c * H * W;
    for (int64_t oy = 0; oy < Ho; ++oy) {
      double fy = (oy + 0.5) * sh - 0.5;
      int64_t y0 = static_cast<int64_t>(std::floor(fy));
      double wy = fy - y0;
      int64_t y0c = std::clamp<int64_t>(y0, 0, H - 1);
      int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, H - 1);
      for (int64_t ox = 0; ox < Wo; ++ox) {
        double fx = (ox + 0.5) * sw - 0.5;
        int64_t x0 = static_cast<int64_t>(std::floor(fx));
        double wx = fx - x0;
        int64_t x0c = std::clamp<int64_t>(x0, 0, W - 1);
        int64_t x1c = std::clamp<int64_t>(x0 + 1, 0, W - 1);
        double g = src[oy * Wo + ox];
        dst[y0c * W + x0c] += static_cast<T>(g * (1 - wy) * (1 - wx));
        dst[y0c * W + x1c] += static_cast<T>(g * (1 - wy) * wx);
        dst[y1c * W + x0c] += static_cast<T>(g * wy * (1 - wx));
        dst[y1c * W + x1c] += static_cast<T>(g * wy * wx);
      }
    }
  }
}

}  // namespace hello::kernels
