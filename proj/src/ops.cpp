#include "ficnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "ficnet/kernels.hpp"

namespace ficnet {
namespace {

using kernels::Trans;

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                     shape_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// Index into b for each element of a under right-aligned broadcasting.
std::vector<std::size_t> broadcast_index(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) {
    throw ShapeError("cannot broadcast " + shape_string(b) + " into " + shape_string(a));
  }
  const std::size_t offset = a.size() - b.size();
  std::vector<std::size_t> bstride(a.size(), 0);
  const auto bst = strides_of(b);
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] == a[offset + i]) {
      bstride[offset + i] = bst[i];
    } else if (b[i] != 1) {
      throw ShapeError("cannot broadcast " + shape_string(b) + " into " + shape_string(a));
    }
  }
  const std::size_t n = numel(a);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(a.size(), 0);
  std::size_t bi = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = bi;
    for (std::size_t d = a.size(); d-- > 0;) {
      ++counter[d];
      bi += bstride[d];
      if (counter[d] < a[d]) break;
      bi -= bstride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

template <class T>
void accumulate(std::vector<T>* slot, std::span<const T> g) {
  if (!slot) return;
  for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Pointwise

template <class T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  auto bidx = std::make_shared<std::vector<std::size_t>>();
  if (!same) *bidx = broadcast_index(a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t n = av.size();
  auto bat = [&](std::size_t i) { return same ? bv[i] : bv[(*bidx)[i]]; };

  std::vector<T> out(n);
  switch (op) {
    case Elementwise::kAdd:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bat(i);
      break;
    case Elementwise::kSub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bat(i);
      break;
    case Elementwise::kMul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bat(i);
      break;
    case Elementwise::kDiv:
      for (std::size_t i = 0; i < n; ++i) {
        const T d = bat(i);
        if (std::abs(d) < T(1e-12)) {
          throw NumericError("div: divisor magnitude below 1e-12 at index " + std::to_string(i));
        }
        out[i] = av[i] / d;
      }
      break;
  }

  static constexpr const char* kNames[] = {"add", "sub", "mul", "div"};
  return Tensor<T>::from_op(
      kNames[static_cast<int>(op)], a.shape(), std::move(out), {a, b},
      [op, same, bidx](const auto& self, std::span<const T> g, std::span<std::vector<T>* const> gin) {
        const auto& av = self.parent_value(0);
        const auto& bv = self.parent_value(1);
        auto bi = [&](std::size_t i) { return same ? i : (*bidx)[i]; };
        const std::size_t n = g.size();
        std::vector<T>* ga = gin[0];
        std::vector<T>* gb = gin[1];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t j = bi(i);
          switch (op) {
            case Elementwise::kAdd:
              if (ga) (*ga)[i] += g[i];
              if (gb) (*gb)[j] += g[i];
              break;
            case Elementwise::kSub:
              if (ga) (*ga)[i] += g[i];
              if (gb) (*gb)[j] -= g[i];
              break;
            case Elementwise::kMul:
              if (ga) (*ga)[i] += g[i] * bv[j];
              if (gb) (*gb)[j] += g[i] * av[i];
              break;
            case Elementwise::kDiv:
              if (ga) (*ga)[i] += g[i] / bv[j];
              if (gb) (*gb)[j] -= g[i] * av[i] / (bv[j] * bv[j]);
              break;
          }
        }
      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= factor;
  return Tensor<T>::from_op("scale", a.shape(), std::move(out), {a},
                            [factor](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * factor;
                            });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  std::vector<T> out(a.values());
  for (auto& v : out) v += offset;
  return Tensor<T>::from_op("add_scalar", a.shape(), std::move(out), {a},
                            [](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              accumulate(gin[0], g);
                            });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return Tensor<T>::from_op("relu", x.shape(), std::move(out), {x},
                            [](const auto& self, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              const auto& xv = self.parent_value(0);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                if (xv[i] > T(0)) (*gin[0])[i] += g[i];
                            });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return Tensor<T>::from_op("sigmoid", x.shape(), std::move(out), {x},
                            [](const auto& self, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              const auto& y = self.value;
                              for (std::size_t i = 0; i < g.size(); ++i)
                                (*gin[0])[i] += g[i] * y[i] * (T(1) - y[i]);
                            });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "softmax");
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.len; ++k) {
        const T e = std::exp(xv[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= total;
    }
  }
  return Tensor<T>::from_op(
      "softmax", x.shape(), std::move(out), {x},
      [s](const auto& self, std::span<const T> g, std::span<std::vector<T>* const> gin) {
        const auto& y = self.value;
        auto& gx = *gin[0];
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            T dot = 0;
            for (std::size_t k = 0; k < s.len; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
            for (std::size_t k = 0; k < s.len; ++k) {
              const std::size_t i = base + k * s.inner;
              gx[i] += y[i] * (g[i] - dot);
            }
          }
        }
      });
}

template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, T eps) {
  if (!(eps > T(0))) throw std::invalid_argument("l2_normalize: eps must be positive");
  const AxisSplit s = split_at(x.shape(), axis, "l2_normalize");
  const auto& xv = x.values();
  std::vector<T> out(xv.size(), T(0));
  auto norms = std::make_shared<std::vector<T>>(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T sq = 0;
      for (std::size_t k = 0; k < s.len; ++k) sq += xv[base + k * s.inner] * xv[base + k * s.inner];
      const T norm = std::sqrt(sq);
      (*norms)[o * s.inner + in] = norm;
      if (norm < eps) continue;
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] = xv[base + k * s.inner] / norm;
    }
  }
  return Tensor<T>::from_op(
      "l2_normalize", x.shape(), std::move(out), {x},
      [s, norms, eps](const auto& self, std::span<const T> g, std::span<std::vector<T>* const> gin) {
        const auto& y = self.value;
        auto& gx = *gin[0];
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const T norm = (*norms)[o * s.inner + in];
            if (norm < eps) continue;
            const std::size_t base = o * s.len * s.inner + in;
            T dot = 0;
            for (std::size_t k = 0; k < s.len; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
            for (std::size_t k = 0; k < s.len; ++k) {
              const std::size_t i = base + k * s.inner;
              gx[i] += (g[i] - y[i] * dot) / norm;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3))) {
    throw ShapeError("matmul: expected rank-2 or rank-3 operands, got " + shape_string(a.shape()) +
                     " and " + shape_string(b.shape()));
  }
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2 || (batched && b.dim(0) != batch)) {
    throw ShapeError("matmul: incompatible " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  std::vector<T> out(batch * m * n);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    kernels::gemm(Trans::kNo, Trans::kNo, m, n, k, T(1), a.data().data() + bi * m * k, k,
                  b.data().data() + bi * k * n, n, T(0), out.data() + bi * m * n, n);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return Tensor<T>::from_op(
      "matmul", std::move(shape), std::move(out), {a, b},
      [batch, m, n, k](const auto& self, std::span<const T> g, std::span<std::vector<T>* const> gin) {
        const T* av = self.parent_value(0).data();
        const T* bv = self.parent_value(1).data();
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const T* gb = g.data() + bi * m * n;
          if (gin[0]) {
            kernels::gemm(Trans::kNo, Trans::kYes, m, k, n, T(1), gb, n, bv + bi * k * n, n, T(1),
                          gin[0]->data() + bi * m * k, k);
          }
          if (gin[1]) {
            kernels::gemm(Trans::kYes, Trans::kNo, k, n, m, T(1), av + bi * m * k, k, gb, n, T(1),
                          gin[1]->data() + bi * k * n, n);
          }
        }
      });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: incompatible " + shape_string(x.shape()) + " and weight " +
                     shape_string(weight.shape()));
  }
  const std::size_t rows = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_dim)) {
    throw ShapeError("linear: bias shape " + shape_string(bias->shape()));
  }
  std::vector<T> out(rows * out_dim);
  kernels::gemm(Trans::kNo, Trans::kYes, rows, out_dim, in, T(1), x.data().data(), in,
                weight.data().data(), in, T(0), out.data(), out_dim);
  if (bias) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out_dim; ++o) out[r * out_dim + o] += (*bias)[o];
  }
  std::vector<Tensor<T>> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return Tensor<T>::from_op(
      "linear", Shape{rows, out_dim}, std::move(out), std::move(parents),
      [rows, in, out_dim](const auto& self, std::span<const T> g, std::span<std::vector<T>* const> gin) {
        const T* xv = self.parent_value(0).data();
        const T* wv = self.parent_value(1).data();
        if (gin[0]) {
          kernels::gemm(Trans::kNo, Trans::kNo, rows, in, out_dim, T(1), g.data(), out_dim, wv, in,
                        T(1), gin[0]->data(), in);
        }
        if (gin[1]) {
          kernels::gemm(Trans::kYes, Trans::kNo, out_dim, in, rows, T(1), g.data(), out_dim, xv, in,
                        T(1), gin[1]->data(), in);
        }
        if (gin.size() > 2 && gin[2]) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_dim; ++o) (*gin[2])[o] += g[r * out_dim + o];
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

template <class T>
Tensor<T> conv_impl(const char* op, const Tensor<T>& x, const Tensor<T>& weight,
                    const std::optional<Tensor<T>>& bias, std::size_t spatial,
                    std::array<std::size_t, 3> stride, std::array<std::size_t, 3> padding) {
  const std::size_t unbatched_rank = spatial + 1;
  const bool batched = x.rank() == unbatched_rank + 1;
  if (!batched && x.rank() != unbatched_rank) {
    throw ShapeError(std::string(op) + ": input rank " + std::to_string(x.rank()) + " invalid");
  }
  if (weight.rank() != spatial + 2) {
    throw ShapeError(std::string(op) + ": weight shape " + shape_string(weight.shape()));
  }
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t off = batched ? 1 : 0;

  kernels::ConvGeometry g;
  g.in_channels = x.dim(off);
  g.out_channels = weight.dim(0);
  if (weight.dim(1) != g.in_channels) {
    throw ShapeError(std::string(op) + ": weight expects " + std::to_string(weight.dim(1)) +
                     " input channels, got " + std::to_string(g.in_channels));
  }
  std::array<std::size_t, 3> in{1, 1, 1}, k{1, 1, 1};
  for (std::size_t i = 0; i < spatial; ++i) {
    in[3 - spatial + i] = x.dim(off + 1 + i);
    k[3 - spatial + i] = weight.dim(2 + i);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    if (k[i] % 2 == 0) throw ShapeError(std::string(op) + ": kernel extents must be odd");
  }
  g.in_d = in[0], g.in_h = in[1], g.in_w = in[2];
  g.k_d = k[0], g.k_h = k[1], g.k_w = k[2];
  g.stride_d = stride[0], g.stride_h = stride[1], g.stride_w = stride[2];
  g.pad_d = padding[0], g.pad_h = padding[1], g.pad_w = padding[2];
  if (!g.valid()) {
    throw ShapeError(std::string(op) + ": kernel " + shape_string(weight.shape()) +
                     " larger than padded input " + shape_string(x.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_channels)) {
    throw ShapeError(std::string(op) + ": bias shape " + shape_string(bias->shape()));
  }

  std::vector<T> out(batch * g.out_channels * g.out_positions());
  kernels::conv_forward(g, batch, x.data().data(), weight.data().data(),
                        bias ? bias->data().data() : nullptr, out.data());

  Shape shape;
  if (batched) shape.push_back(batch);
  shape.push_back(g.out_channels);
  const std::array<std::size_t, 3> outs{g.out_d(), g.out_h(), g.out_w()};
  for (std::size_t i = 3 - spatial; i < 3; ++i) shape.push_back(outs[i]);

  std::vector<Tensor<T>> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return Tensor<T>::from_op(
      op, std::move(shape), std::move(out), std::move(parents),
      [g, batch](const auto& self, std::span<const T> grad, std::span<std::vector<T>* const> gin) {
        T* gb = gin.size() > 2 && gin[2] ? gin[2]->data() : nullptr;
        kernels::conv_backward(g, batch, self.parent_value(0).data(), self.parent_value(1).data(),
                               grad.data(), gin[0] ? gin[0]->data() : nullptr,
                               gin[1] ? gin[1]->data() : nullptr, gb);
      });
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 std::size_t stride, std::size_t padding) {
  return conv_impl("conv2d", x, weight, bias, 2, {1, stride, stride}, {0, padding, padding});
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 std::array<std::size_t, 3> stride, std::array<std::size_t, 3> padding) {
  return conv_impl("conv3d", x, weight, bias, 3, stride, padding);
}

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  if (x.rank() < 2 || k == 0 || stride == 0) throw ShapeError("max_pool2d: invalid arguments");
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  if (h < k || w < k) throw ShapeError("max_pool2d: window larger than input " + shape_string(x.shape()));
  const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  const std::size_t planes = x.size() / (h * w);
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  const auto& xv = x.values();
  std::vector<T> out(planes * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t i = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (xv[i] > xv[best]) best = i;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
    }
  }
  return Tensor<T>::from_op("max_pool2d", std::move(shape), std::move(out), {x},
                            [argmax](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              for (std::size_t o = 0; o < g.size(); ++o) (*gin[0])[(*argmax)[o]] += g[o];
                            });
}

template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormState<T>& state, bool training, T eps, T momentum) {
  if (x.rank() != 3 && x.rank() != 4) throw ShapeError("batch_norm2d: expected rank 3 or 4 input");
  const std::size_t off = x.rank() == 4 ? 1 : 0;
  const std::size_t batch = off ? x.dim(0) : 1;
  const std::size_t channels = x.dim(off);
  const std::size_t plane = x.dim(off + 1) * x.dim(off + 2);
  if (gamma.size() != channels || beta.size() != channels || state.running_mean.size() != channels ||
      state.running_var.size() != channels) {
    throw ShapeError("batch_norm2d: parameter extents do not match " + std::to_string(channels) + " channels");
  }
  const std::size_t count = batch * plane;
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(channels);

#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < channels; ++c) {
    T mu, var;
    if (training) {
      T s = 0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < plane; ++p) s += xv[(b * channels + c) * plane + p];
      mu = s / T(count);
      T sq = 0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < plane; ++p) {
          const T d = xv[(b * channels + c) * plane + p] - mu;
          sq += d * d;
        }
      var = sq / T(count);
      const T unbiased = count > 1 ? sq / T(count - 1) : var;
      state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mu;
      state.running_var[c] = (T(1) - momentum) * state.running_var[c] + momentum * unbiased;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[c] = is;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (b * channels + c) * plane + p;
        const T h = (xv[i] - mu) * is;
        (*xhat)[i] = h;
        out[i] = gamma[c] * h + beta[c];
      }
  }

  return Tensor<T>::from_op(
      "batch_norm2d", x.shape(), std::move(out), {x, gamma, beta},
      [=](const auto& self, std::span<const T> g, std::span<std::vector<T>* const> gin) {
        const auto& gam = self.parent_value(1);
#pragma omp parallel for schedule(static)
        for (std::size_t c = 0; c < channels; ++c) {
          T sg = 0, sgh = 0;
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t i = (b * channels + c) * plane + p;
              sg += g[i];
              sgh += g[i] * (*xhat)[i];
            }
          if (gin[1]) (*gin[1])[c] += sgh;
          if (gin[2]) (*gin[2])[c] += sg;
          if (!gin[0]) continue;
          const T is = (*inv_std)[c];
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t i = (b * channels + c) * plane + p;
              if (training) {
                (*gin[0])[i] += gam[c] * is / T(count) * (T(count) * g[i] - sg - (*xhat)[i] * sgh);
              } else {
                (*gin[0])[i] += gam[c] * is * g[i];
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  return Tensor<T>::from_op("reshape", std::move(shape), x.values(), {x},
                            [](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              accumulate(gin[0], g);
                            });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeError("permute: axis count mismatch");
  std::vector<bool> used(r, false);
  for (std::size_t a : axes) {
    if (a >= r || used[a]) throw ShapeError("permute: invalid axis list");
    used[a] = true;
  }
  const auto in_strides = strides_of(x.shape());
  Shape shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    shape[i] = x.dim(axes[i]);
    src_stride[i] = in_strides[axes[i]];
  }
  const std::size_t n = x.size();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t si = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = si;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      si += src_stride[d];
      if (counter[d] < shape[d]) break;
      si -= src_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  const auto& xv = x.values();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*src)[i]];
  return Tensor<T>::from_op("permute", std::move(shape), std::move(out), {x},
                            [src](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[(*src)[i]] += g[i];
                            });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  return Tensor<T>::from_op("sum", Shape{}, std::vector<T>{s}, {x},
                            [](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              for (auto& v : *gin[0]) v += g[0];
                            });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "sum");
  const auto& xv = x.values();
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += xv[(o * s.len + k) * s.inner + in];
  Shape shape = x.shape();
  shape.erase(shape.begin() + std::ptrdiff_t(axis));
  return Tensor<T>::from_op("sum_axis", std::move(shape), std::move(out), {x},
                            [s](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              auto& gx = *gin[0];
                              for (std::size_t o = 0; o < s.outer; ++o)
                                for (std::size_t k = 0; k < s.len; ++k)
                                  for (std::size_t in = 0; in < s.inner; ++in)
                                    gx[(o * s.len + k) * s.inner + in] += g[o * s.inner + in];
                            });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / T(x.size()));
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  const std::size_t len = x.dim(axis);
  return scale(sum(x, axis), T(1) / T(len));
}

template <class T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::size_t>& indices) {
  if (x.rank() == 0) throw ShapeError("index_select on scalar");
  const std::size_t rows = x.dim(0);
  const std::size_t row = x.size() / std::max<std::size_t>(rows, 1);
  for (std::size_t i : indices) {
    if (i >= rows) throw ShapeError("index_select: index " + std::to_string(i) + " out of range");
  }
  std::vector<T> out(indices.size() * row);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(xv.begin() + std::ptrdiff_t(indices[r] * row), row, out.begin() + std::ptrdiff_t(r * row));
  Shape shape = x.shape();
  shape[0] = indices.size();
  return Tensor<T>::from_op("index_select", std::move(shape), std::move(out), {x},
                            [indices, row](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              auto& gx = *gin[0];
                              for (std::size_t r = 0; r < indices.size(); ++r)
                                for (std::size_t j = 0; j < row; ++j) gx[indices[r] * row + j] += g[r * row + j];
                            });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError("concat: mismatched trailing extents " + shape_string(p.shape()));
    }
    rows += p.dim(0);
    sizes.push_back(p.size());
  }
  std::vector<T> out;
  out.reserve(numel(tail) * rows);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Shape shape = parts[0].shape();
  shape[0] = rows;
  return Tensor<T>::from_op("concat", std::move(shape), std::move(out), parts,
                            [sizes](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              std::size_t off = 0;
                              for (std::size_t k = 0; k < sizes.size(); ++k) {
                                if (gin[k]) accumulate(gin[k], g.subspan(off, sizes[k]));
                                off += sizes[k];
                              }
                            });
}

template <class T>
Tensor<T> neighborhood_unfold(const Tensor<T>& x, std::size_t u, std::size_t v) {
  if (u % 2 == 0 || v % 2 == 0) throw ShapeError("neighborhood_unfold: window extents must be odd");
  if (x.rank() < 2 || x.rank() + 2 > kMaxRank) throw ShapeError("neighborhood_unfold: invalid input rank");
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.size() / (h * w);
  const std::ptrdiff_t hu = std::ptrdiff_t(u / 2), hv = std::ptrdiff_t(v / 2);
  // Source index per output element, or npos when the neighbor lies outside the image.
  constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  auto src = std::make_shared<std::vector<std::size_t>>(planes * h * w * u * v);
  std::size_t o = 0;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (std::size_t a = 0; a < u; ++a)
          for (std::size_t b = 0; b < v; ++b, ++o) {
            const std::ptrdiff_t sy = std::ptrdiff_t(y) + std::ptrdiff_t(a) - hu;
            const std::ptrdiff_t sx = std::ptrdiff_t(xx) + std::ptrdiff_t(b) - hv;
            (*src)[o] = (sy >= 0 && sx >= 0 && sy < std::ptrdiff_t(h) && sx < std::ptrdiff_t(w))
                            ? (p * h + std::size_t(sy)) * w + std::size_t(sx)
                            : npos;
          }
  const auto& xv = x.values();
  std::vector<T> out(src->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*src)[i] == npos ? T(0) : xv[(*src)[i]];
  Shape shape = x.shape();
  shape.push_back(u);
  shape.push_back(v);
  return Tensor<T>::from_op("neighborhood_unfold", std::move(shape), std::move(out), {x},
                            [src](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              for (std::size_t i = 0; i < g.size(); ++i)
                                if ((*src)[i] != npos) (*gin[0])[(*src)[i]] += g[i];
                            });
}

template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() < 2 || out_h == 0 || out_w == 0) throw ShapeError("adaptive_avg_pool2d: invalid arguments");
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.size() / (h * w);
  auto cell = [](std::size_t i, std::size_t in, std::size_t out) {
    const std::size_t lo = (i * in) / out;
    const std::size_t hi = ((i + 1) * in + out - 1) / out;
    return std::pair{lo, hi};
  };
  const auto& xv = x.values();
  std::vector<T> out(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto [y0, y1] = cell(oy, h, out_h);
        const auto [x0, x1] = cell(ox, w, out_w);
        T s = 0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) s += xv[(p * h + y) * w + xx];
        out[(p * out_h + oy) * out_w + ox] = s / T((y1 - y0) * (x1 - x0));
      }
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  return Tensor<T>::from_op(
      "adaptive_avg_pool2d", std::move(shape), std::move(out), {x},
      [=](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
        auto& gx = *gin[0];
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t oy = 0; oy < out_h; ++oy)
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const auto [y0, y1] = cell(oy, h, out_h);
              const auto [x0, x1] = cell(ox, w, out_w);
              const T share = g[(p * out_h + oy) * out_w + ox] / T((y1 - y0) * (x1 - x0));
              for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t xx = x0; xx < x1; ++xx) gx[(p * h + y) * w + xx] += share;
            }
      });
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 1 && logits.rank() != 2) throw ShapeError("cross_entropy: logits must be rank 1 or 2");
  const std::size_t rows = logits.rank() == 2 ? logits.dim(0) : 1;
  const std::size_t n = logits.dim(logits.rank() - 1);
  if (targets.size() != rows) throw ShapeError("cross_entropy: one target per row required");
  const auto& lv = logits.values();
  auto probs = std::make_shared<std::vector<T>>(lv.size());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= n) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " >= " + std::to_string(n));
    }
    const T* row = lv.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const T log_z = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) (*probs)[r * n + j] = std::exp(row[j] - log_z);
    total += log_z - row[targets[r]];
  }
  return Tensor<T>::from_op("cross_entropy", Shape{}, std::vector<T>{total / T(rows)}, {logits},
                            [probs, targets, rows, n](const auto&, std::span<const T> g,
                                                      std::span<std::vector<T>* const> gin) {
                              const T s = g[0] / T(rows);
                              auto& gl = *gin[0];
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < n; ++j)
                                  gl[r * n + j] += s * ((*probs)[r * n + j] - (j == targets[r] ? T(1) : T(0)));
                            });
}

#define FICNET_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> elementwise(Elementwise, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&);  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&,   \
                            std::size_t, std::size_t);                                             \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&,   \
                            std::array<std::size_t, 3>, std::array<std::size_t, 3>);               \
  template Tensor<T> max_pool2d(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                  BatchNormState<T>&, bool, T, T);                                 \
  template Tensor<T> l2_normalize(const Tensor<T>&, std::size_t, T);                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                   \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> sum(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&, std::size_t);                                          \
  template Tensor<T> index_select(const Tensor<T>&, const std::vector<std::size_t>&);              \
  template Tensor<T> concat(const std::vector<Tensor<T>>&);                                        \
  template Tensor<T> neighborhood_unfold(const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> adaptive_avg_pool2d(const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<std::size_t>&);

FICNET_INSTANTIATE_OPS(float)
FICNET_INSTANTIATE_OPS(double)

}  // namespace ficnet
