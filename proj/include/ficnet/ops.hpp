#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "ficnet/tensor.hpp"

namespace ficnet {

enum class Elementwise { kAdd, kSub, kMul, kDiv };

/// Pointwise a (op) b. `b` broadcasts into a's shape: right-aligned, each of its
/// extents equal to a's or 1. Division by |b| < 1e-12 is an error.
template <class T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::kAdd, a, b); }
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::kSub, a, b); }
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::kMul, a, b); }
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::kDiv, a, b); }

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset);

/// [m x k] * [k x n], or batched [B x m x k] * [B x k x n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x [B x in] times weight [out x in] transposed, plus bias [out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias);

/// Cross-correlation with zero padding. x is [Cin x H x W] or [B x Cin x H x W],
/// weight is [Cout x Cin x kh x kw] with odd kernel extents.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 std::size_t stride = 1, std::size_t padding = 0);

/// As conv2d over three spatial axes. x is [Cin x D x H x W] or [B x Cin x D x H x W].
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 std::array<std::size_t, 3> stride = {1, 1, 1},
                 std::array<std::size_t, 3> padding = {0, 0, 0});

/// Max over k x k windows of the last two axes. Gradient goes to the first maximum
/// in row-major order.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k = 2, std::size_t stride = 2);

template <class T>
Tensor<T> relu(const Tensor<T>& x);
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// Running statistics owned by a batch-norm layer.
template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel normalization of [B x C x H x W] (or [C x H x W]). In training mode
/// batch statistics are used and `state` is updated with the given momentum.
template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormState<T>& state, bool training, T eps = T(1e-5),
                       T momentum = T(0.1));

/// Unit L2 norm along `axis`; fibers with norm below eps become zero.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, T eps = T(1e-8));

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);

template <class T>
Tensor<T> sum(const Tensor<T>& x);
template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis);
template <class T>
Tensor<T> mean(const Tensor<T>& x);
template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis);

/// Rows of x along axis 0.
template <class T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::size_t>& indices);
/// Concatenation along axis 0.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts);

/// [... x H x W] -> [... x H x W x U x V] with out[.., h, w, u, v] = x[.., h+u-U/2, w+v-V/2],
/// zero outside the image. U and V must be odd.
template <class T>
Tensor<T> neighborhood_unfold(const Tensor<T>& x, std::size_t u, std::size_t v);

/// Average pooling of the last two axes onto an out_h x out_w grid; cell i covers
/// [floor(i*H/out_h), ceil((i+1)*H/out_h)).
template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

/// Mean over rows of -log softmax(logits[row])[target[row]]. logits is [B x n] or [n].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets);

}  // namespace ficnet
