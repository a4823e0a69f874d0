#include "ficnet/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace ficnet::kernels {
namespace {

typedef float VecF32 __attribute__((vector_size(64)));
typedef double VecF64 __attribute__((vector_size(64)));

template <class T>
struct Simd;
template <>
struct Simd<float> {
  using Vec = VecF32;
};
template <>
struct Simd<double> {
  using Vec = VecF64;
};

constexpr std::size_t kMr = 8;
constexpr std::size_t kVecsPerRow = 2;
constexpr std::size_t kKc = 256;
// Upper bound on im2col scratch per chunk, in elements.
constexpr std::size_t kMaxColElems = std::size_t{1} << 23;

template <class T>
constexpr std::size_t lanes() {
  return 64 / sizeof(T);
}
template <class T>
constexpr std::size_t nr() {
  return kVecsPerRow * lanes<T>();
}

template <class T>
inline T at(const T* a, std::size_t ld, Trans t, std::size_t row, std::size_t col) {
  return t == Trans::kNo ? a[row * ld + col] : a[col * ld + row];
}

// Packs op(A)[0:m, p0:p0+kc] into kMr-row panels, p-major inside a panel.
template <class T>
void pack_a(Trans t, const T* a, std::size_t lda, std::size_t m, std::size_t p0, std::size_t kc,
            T* out) {
  const std::size_t panels = (m + kMr - 1) / kMr;
  for (std::size_t ib = 0; ib < panels; ++ib) {
    T* dst = out + ib * kc * kMr;
    for (std::size_t p = 0; p < kc; ++p) {
      for (std::size_t ii = 0; ii < kMr; ++ii) {
        const std::size_t i = ib * kMr + ii;
        dst[p * kMr + ii] = i < m ? at(a, lda, t, i, p0 + p) : T(0);
      }
    }
  }
}

// Packs op(B)[p0:p0+kc, j0:j0+nr] row by row.
template <class T>
void pack_b(Trans t, const T* b, std::size_t ldb, std::size_t n, std::size_t p0, std::size_t kc,
            std::size_t j0, T* out) {
  constexpr std::size_t kNr = nr<T>();
  for (std::size_t p = 0; p < kc; ++p) {
    for (std::size_t jj = 0; jj < kNr; ++jj) {
      const std::size_t j = j0 + jj;
      out[p * kNr + jj] = j < n ? at(b, ldb, t, p0 + p, j) : T(0);
    }
  }
}

template <class T>
inline void micro_kernel(std::size_t kc, const T* __restrict a, const T* __restrict b,
                         T* __restrict acc) {
  using Vec = typename Simd<T>::Vec;
  constexpr std::size_t kL = lanes<T>();
  Vec c[kMr][kVecsPerRow];
  for (std::size_t ii = 0; ii < kMr; ++ii) {
    for (std::size_t v = 0; v < kVecsPerRow; ++v) c[ii][v] = Vec{};
  }
  for (std::size_t p = 0; p < kc; ++p) {
    Vec bv[kVecsPerRow];
    for (std::size_t v = 0; v < kVecsPerRow; ++v) {
      std::memcpy(&bv[v], b + (p * kVecsPerRow + v) * kL, sizeof(Vec));
    }
    for (std::size_t ii = 0; ii < kMr; ++ii) {
      const T av = a[p * kMr + ii];
      for (std::size_t v = 0; v < kVecsPerRow; ++v) c[ii][v] += av * bv[v];
    }
  }
  for (std::size_t ii = 0; ii < kMr; ++ii) {
    for (std::size_t v = 0; v < kVecsPerRow; ++v) {
      std::memcpy(acc + (ii * kVecsPerRow + v) * kL, &c[ii][v], sizeof(Vec));
    }
  }
}

template <class T>
void scale_c(std::size_t m, std::size_t n, T beta, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T& v = c[i * ldc + j];
      v = beta == T(0) ? T(0) : beta * v;
    }
  }
}

}  // namespace

template <class T>
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0 || alpha == T(0)) {
    scale_c(m, n, beta, c, ldc);
    return;
  }
  constexpr std::size_t kNr = nr<T>();
  const std::size_t panels = (m + kMr - 1) / kMr;
  const std::size_t nblocks = (n + kNr - 1) / kNr;
  std::vector<T> apack(panels * kMr * std::min(k, kKc));

  for (std::size_t p0 = 0; p0 < k; p0 += kKc) {
    const std::size_t kc = std::min(kKc, k - p0);
    const bool first = p0 == 0;
    pack_a(trans_a, a, lda, m, p0, kc, apack.data());

#pragma omp parallel
    {
      std::vector<T> bpack(kc * kNr);
      alignas(64) T acc[kMr * kNr];
#pragma omp for schedule(static)
      for (std::size_t jb = 0; jb < nblocks; ++jb) {
        const std::size_t j0 = jb * kNr;
        const std::size_t ncols = std::min(kNr, n - j0);
        pack_b(trans_b, b, ldb, n, p0, kc, j0, bpack.data());
        for (std::size_t ib = 0; ib < panels; ++ib) {
          const std::size_t i0 = ib * kMr;
          const std::size_t nrows = std::min(kMr, m - i0);
          micro_kernel<T>(kc, apack.data() + ib * kc * kMr, bpack.data(), acc);
          for (std::size_t ii = 0; ii < nrows; ++ii) {
            T* crow = c + (i0 + ii) * ldc + j0;
            const T* arow = acc + ii * kNr;
            if (first) {
              if (beta == T(0)) {
                for (std::size_t jj = 0; jj < ncols; ++jj) crow[jj] = alpha * arow[jj];
              } else {
                for (std::size_t jj = 0; jj < ncols; ++jj)
                  crow[jj] = beta * crow[jj] + alpha * arow[jj];
              }
            } else {
              for (std::size_t jj = 0; jj < ncols; ++jj) crow[jj] += alpha * arow[jj];
            }
          }
        }
      }
    }
  }
}

template <class T>
void im2col(const ConvGeometry& g, const T* image, T* col, std::size_t ld,
            std::size_t col_offset) {
  const std::size_t od = g.out_d(), oh = g.out_h(), ow = g.out_w();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    const T* chan = image + ci * g.in_positions();
    for (std::size_t kz = 0; kz < g.k_d; ++kz) {
      for (std::size_t ky = 0; ky < g.k_h; ++ky) {
        for (std::size_t kx = 0; kx < g.k_w; ++kx, ++row) {
          T* dst = col + row * ld + col_offset;
          for (std::size_t oz = 0; oz < od; ++oz) {
            const std::ptrdiff_t iz = std::ptrdiff_t(oz * g.stride_d + kz) - std::ptrdiff_t(g.pad_d);
            const bool z_in = iz >= 0 && iz < std::ptrdiff_t(g.in_d);
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const std::ptrdiff_t iy =
                  std::ptrdiff_t(oy * g.stride_h + ky) - std::ptrdiff_t(g.pad_h);
              const bool y_in = z_in && iy >= 0 && iy < std::ptrdiff_t(g.in_h);
              T* out = dst + (oz * oh + oy) * ow;
              if (!y_in) {
                std::fill(out, out + ow, T(0));
                continue;
              }
              const T* src = chan + (std::size_t(iz) * g.in_h + std::size_t(iy)) * g.in_w;
              if (g.stride_w == 1) {
                // Valid outputs are ox in [lo, hi): a contiguous copy between zero margins.
                const std::ptrdiff_t shift = std::ptrdiff_t(kx) - std::ptrdiff_t(g.pad_w);
                const std::size_t lo = std::size_t(std::clamp<std::ptrdiff_t>(-shift, 0, std::ptrdiff_t(ow)));
                const std::size_t hi = std::size_t(
                    std::clamp<std::ptrdiff_t>(std::ptrdiff_t(g.in_w) - shift, std::ptrdiff_t(lo), std::ptrdiff_t(ow)));
                std::fill(out, out + lo, T(0));
                std::copy(src + std::ptrdiff_t(lo) + shift, src + std::ptrdiff_t(hi) + shift, out + lo);
                std::fill(out + hi, out + ow, T(0));
                continue;
              }
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::ptrdiff_t ix =
                    std::ptrdiff_t(ox * g.stride_w + kx) - std::ptrdiff_t(g.pad_w);
                out[ox] = (ix >= 0 && ix < std::ptrdiff_t(g.in_w)) ? src[ix] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const ConvGeometry& g, const T* col, std::size_t ld, std::size_t col_offset,
            T* image) {
  const std::size_t od = g.out_d(), oh = g.out_h(), ow = g.out_w();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    T* chan = image + ci * g.in_positions();
    for (std::size_t kz = 0; kz < g.k_d; ++kz) {
      for (std::size_t ky = 0; ky < g.k_h; ++ky) {
        for (std::size_t kx = 0; kx < g.k_w; ++kx, ++row) {
          const T* src = col + row * ld + col_offset;
          for (std::size_t oz = 0; oz < od; ++oz) {
            const std::ptrdiff_t iz = std::ptrdiff_t(oz * g.stride_d + kz) - std::ptrdiff_t(g.pad_d);
            if (iz < 0 || iz >= std::ptrdiff_t(g.in_d)) continue;
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const std::ptrdiff_t iy =
                  std::ptrdiff_t(oy * g.stride_h + ky) - std::ptrdiff_t(g.pad_h);
              if (iy < 0 || iy >= std::ptrdiff_t(g.in_h)) continue;
              T* dst = chan + (std::size_t(iz) * g.in_h + std::size_t(iy)) * g.in_w;
              const T* in = src + (oz * oh + oy) * ow;
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::ptrdiff_t ix =
                    std::ptrdiff_t(ox * g.stride_w + kx) - std::ptrdiff_t(g.pad_w);
                if (ix >= 0 && ix < std::ptrdiff_t(g.in_w)) dst[ix] += in[ox];
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv_forward(const ConvGeometry& g, std::size_t batch, const T* x, const T* w,
                  const T* bias, T* y) {
  const std::size_t positions = g.out_positions();
  const std::size_t patch = g.patch_size();
  const std::size_t in_stride = g.in_channels * g.in_positions();
  const std::size_t out_stride = g.out_channels * positions;
  const std::size_t chunk =
      std::clamp<std::size_t>(kMaxColElems / std::max<std::size_t>(1, patch * positions), 1, batch);
  std::vector<T> col(patch * chunk * positions);
  std::vector<T> ymat(g.out_channels * chunk * positions);

  for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
    const std::size_t cb = std::min(chunk, batch - b0);
    const std::size_t ld = cb * positions;
#pragma omp parallel for schedule(static)
    for (std::size_t bb = 0; bb < cb; ++bb) {
      im2col(g, x + (b0 + bb) * in_stride, col.data(), ld, bb * positions);
    }
    gemm(Trans::kNo, Trans::kNo, g.out_channels, ld, patch, T(1), w, patch, col.data(), ld,
         T(0), ymat.data(), ld);
#pragma omp parallel for schedule(static)
    for (std::size_t bb = 0; bb < cb; ++bb) {
      T* out = y + (b0 + bb) * out_stride;
      for (std::size_t co = 0; co < g.out_channels; ++co) {
        const T* src = ymat.data() + co * ld + bb * positions;
        const T add = bias ? bias[co] : T(0);
        for (std::size_t p = 0; p < positions; ++p) out[co * positions + p] = src[p] + add;
      }
    }
  }
}

template <class T>
void conv_backward(const ConvGeometry& g, std::size_t batch, const T* x, const T* w,
                   const T* grad_y, T* grad_x, T* grad_w, T* grad_bias) {
  const std::size_t positions = g.out_positions();
  const std::size_t patch = g.patch_size();
  const std::size_t in_stride = g.in_channels * g.in_positions();
  const std::size_t out_stride = g.out_channels * positions;
  const std::size_t chunk =
      std::clamp<std::size_t>(kMaxColElems / std::max<std::size_t>(1, patch * positions), 1, batch);
  std::vector<T> col(patch * chunk * positions);
  std::vector<T> gmat(g.out_channels * chunk * positions);

  for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
    const std::size_t cb = std::min(chunk, batch - b0);
    const std::size_t ld = cb * positions;
#pragma omp parallel for schedule(static)
    for (std::size_t bb = 0; bb < cb; ++bb) {
      const T* src = grad_y + (b0 + bb) * out_stride;
      for (std::size_t co = 0; co < g.out_channels; ++co) {
        std::copy(src + co * positions, src + (co + 1) * positions,
                  gmat.data() + co * ld + bb * positions);
      }
    }
    if (grad_bias) {
      for (std::size_t co = 0; co < g.out_channels; ++co) {
        T s = 0;
        for (std::size_t j = 0; j < ld; ++j) s += gmat[co * ld + j];
        grad_bias[co] += s;
      }
    }
    if (grad_w) {
#pragma omp parallel for schedule(static)
      for (std::size_t bb = 0; bb < cb; ++bb) {
        im2col(g, x + (b0 + bb) * in_stride, col.data(), ld, bb * positions);
      }
      gemm(Trans::kNo, Trans::kYes, g.out_channels, patch, ld, T(1), gmat.data(), ld,
           col.data(), ld, T(1), grad_w, patch);
    }
    if (grad_x) {
      gemm(Trans::kYes, Trans::kNo, patch, ld, g.out_channels, T(1), w, patch, gmat.data(), ld,
           T(0), col.data(), ld);
#pragma omp parallel for schedule(static)
      for (std::size_t bb = 0; bb < cb; ++bb) {
        col2im(g, col.data(), ld, bb * positions, grad_x + (b0 + bb) * in_stride);
      }
    }
  }
}

namespace reference {

template <class T>
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += at(a, lda, trans_a, i, p) * at(b, ldb, trans_b, p, j);
      T& out = c[i * ldc + j];
      out = (beta == T(0) ? T(0) : beta * out) + alpha * s;
    }
  }
}

namespace {

// Calls fn(co, ci, kz, ky, kx, oz, oy, ox, x_index) for every in-bounds tap.
template <class Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  const std::size_t od = g.out_d(), oh = g.out_h(), ow = g.out_w();
  for (std::size_t co = 0; co < g.out_channels; ++co)
    for (std::size_t oz = 0; oz < od; ++oz)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t kz = 0; kz < g.k_d; ++kz)
              for (std::size_t ky = 0; ky < g.k_h; ++ky)
                for (std::size_t kx = 0; kx < g.k_w; ++kx) {
                  const std::ptrdiff_t iz = std::ptrdiff_t(oz * g.stride_d + kz) - std::ptrdiff_t(g.pad_d);
                  const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride_h + ky) - std::ptrdiff_t(g.pad_h);
                  const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride_w + kx) - std::ptrdiff_t(g.pad_w);
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= std::ptrdiff_t(g.in_d) ||
                      iy >= std::ptrdiff_t(g.in_h) || ix >= std::ptrdiff_t(g.in_w))
                    continue;
                  const std::size_t xi =
                      ((ci * g.in_d + std::size_t(iz)) * g.in_h + std::size_t(iy)) * g.in_w +
                      std::size_t(ix);
                  const std::size_t wi = (((co * g.in_channels + ci) * g.k_d + kz) * g.k_h + ky) * g.k_w + kx;
                  const std::size_t yi = ((co * od + oz) * oh + oy) * ow + ox;
                  fn(xi, wi, yi);
                }
}

}  // namespace

template <class T>
void conv_forward(const ConvGeometry& g, std::size_t batch, const T* x, const T* w,
                  const T* bias, T* y) {
  const std::size_t positions = g.out_positions();
  const std::size_t in_stride = g.in_channels * g.in_positions();
  const std::size_t out_stride = g.out_channels * positions;
  for (std::size_t b = 0; b < batch; ++b) {
    T* out = y + b * out_stride;
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t p = 0; p < positions; ++p) out[co * positions + p] = bias ? bias[co] : T(0);
    const T* in = x + b * in_stride;
    for_each_tap(g, [&](std::size_t xi, std::size_t wi, std::size_t yi) { out[yi] += w[wi] * in[xi]; });
  }
}

template <class T>
void conv_backward(const ConvGeometry& g, std::size_t batch, const T* x, const T* w,
                   const T* grad_y, T* grad_x, T* grad_w, T* grad_bias) {
  const std::size_t positions = g.out_positions();
  const std::size_t in_stride = g.in_channels * g.in_positions();
  const std::size_t out_stride = g.out_channels * positions;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* gy = grad_y + b * out_stride;
    const T* in = x + b * in_stride;
    if (grad_bias) {
      for (std::size_t co = 0; co < g.out_channels; ++co)
        for (std::size_t p = 0; p < positions; ++p) grad_bias[co] += gy[co * positions + p];
    }
    for_each_tap(g, [&](std::size_t xi, std::size_t wi, std::size_t yi) {
      if (grad_w) grad_w[wi] += gy[yi] * in[xi];
      if (grad_x) grad_x[b * in_stride + xi] += gy[yi] * w[wi];
    });
  }
}

}  // namespace reference

#define FICNET_INSTANTIATE_KERNELS(T)                                                        \
  template void gemm<T>(Trans, Trans, std::size_t, std::size_t, std::size_t, T, const T*,    \
                        std::size_t, const T*, std::size_t, T, T*, std::size_t);             \
  template void im2col<T>(const ConvGeometry&, const T*, T*, std::size_t, std::size_t);      \
  template void col2im<T>(const ConvGeometry&, const T*, std::size_t, std::size_t, T*);      \
  template void conv_forward<T>(const ConvGeometry&, std::size_t, const T*, const T*,        \
                                const T*, T*);                                               \
  template void conv_backward<T>(const ConvGeometry&, std::size_t, const T*, const T*,       \
                                 const T*, T*, T*, T*);                                      \
  template void reference::gemm<T>(Trans, Trans, std::size_t, std::size_t, std::size_t, T,   \
                                   const T*, std::size_t, const T*, std::size_t, T, T*,      \
                                   std::size_t);                                             \
  template void reference::conv_forward<T>(const ConvGeometry&, std::size_t, const T*,       \
                                           const T*, const T*, T*);                          \
  template void reference::conv_backward<T>(const ConvGeometry&, std::size_t, const T*,      \
                                            const T*, const T*, T*, T*, T*);

FICNET_INSTANTIATE_KERNELS(float)
FICNET_INSTANTIATE_KERNELS(double)

}  // namespace ficnet::kernels
