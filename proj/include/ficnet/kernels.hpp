#pragma once

// Raw numeric kernels behind the differentiable ops.
//
// Every kernel has an OpenMP-parallel implementation and a plain serial
// version in `kernels::reference`. The parallel versions partition work so
// that each output element is produced by exactly one thread with a fixed
// summation order, which keeps results bit-identical for any thread count.

#include <cstddef>

namespace ficnet::kernels {

enum class Trans { kNo, kYes };

/// C = alpha * op(A) * op(B) + beta * C, row-major. op(A) is m x k, op(B) is k x n.
/// When beta == 0 the previous contents of C are ignored.
template <class T>
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc);

/// Geometry of a 3-D cross-correlation. 2-D convolutions use depth 1 with kd = 1.
struct ConvGeometry {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t in_d = 1, in_h = 1, in_w = 1;
  std::size_t k_d = 1, k_h = 1, k_w = 1;
  std::size_t stride_d = 1, stride_h = 1, stride_w = 1;
  std::size_t pad_d = 0, pad_h = 0, pad_w = 0;

  std::size_t out_d() const { return (in_d + 2 * pad_d - k_d) / stride_d + 1; }
  std::size_t out_h() const { return (in_h + 2 * pad_h - k_h) / stride_h + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad_w - k_w) / stride_w + 1; }
  std::size_t out_positions() const { return out_d() * out_h() * out_w(); }
  std::size_t in_positions() const { return in_d * in_h * in_w; }
  std::size_t patch_size() const { return in_channels * k_d * k_h * k_w; }
  bool valid() const {
    return k_d <= in_d + 2 * pad_d && k_h <= in_h + 2 * pad_h && k_w <= in_w + 2 * pad_w &&
           stride_d > 0 && stride_h > 0 && stride_w > 0;
  }
};

/// Unfolds one image into columns [col_offset, col_offset + out_positions) of a
/// patch_size x ld matrix.
template <class T>
void im2col(const ConvGeometry& g, const T* image, T* col, std::size_t ld,
            std::size_t col_offset);

/// Adjoint of im2col: accumulates the columns back into `image`.
template <class T>
void col2im(const ConvGeometry& g, const T* col, std::size_t ld, std::size_t col_offset,
            T* image);

/// y[b, co, pos] = bias[co] + sum w[co, ci, kpos] * x[b, ci, pos + kpos]. bias may be null.
template <class T>
void conv_forward(const ConvGeometry& g, std::size_t batch, const T* x, const T* w,
                  const T* bias, T* y);

/// Accumulates (+=) gradients into the non-null outputs.
template <class T>
void conv_backward(const ConvGeometry& g, std::size_t batch, const T* x, const T* w,
                   const T* grad_y, T* grad_x, T* grad_w, T* grad_bias);

namespace reference {

template <class T>
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc);

template <class T>
void conv_forward(const ConvGeometry& g, std::size_t batch, const T* x, const T* w,
                  const T* bias, T* y);

template <class T>
void conv_backward(const ConvGeometry& g, std::size_t batch, const T* x, const T* w,
                   const T* grad_y, T* grad_x, T* grad_w, T* grad_bias);

}  // namespace reference

}  // namespace ficnet::kernels
