#pragma once

// Independent oracles for the tests: finite-difference gradient checking and
// straightforward loop implementations of the attention, neighborhood and
// prototype computations. Nothing here calls into the pipeline modules.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ficnet/tensor.hpp"

namespace ficnet::testkit {

struct GradcheckResult {
  double worst = 0;             // max over elements of |a - n| / max(|a|, |n|, 1e-8)
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0, numeric = 0;  // values at the worst element
  std::size_t elements = 0;
  std::vector<double> relative;        // per element, inputs in order
  std::vector<double> analytic_values;  // per element, inputs in order
};

template <class T>
using ScalarFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

/// Central differences with step h for every element of every input, compared
/// against reverse-mode gradients. `fn` must return a rank-0 tensor.
template <class T>
GradcheckResult gradcheck(const ScalarFn<T>& fn, const std::vector<Tensor<T>>& inputs, double h);

/// Analytic gradients of `fn` (precision T) against central differences of
/// `reference`, the same function evaluated in 64-bit. Inputs must be exactly
/// representable in T. Differencing in T itself leaves rounding noise of order
/// eps * |f| / h in every numeric slope, which is what this variant removes.
template <class T>
GradcheckResult gradcheck_against(const ScalarFn<T>& fn, const ScalarFn<double>& reference,
                                  const std::vector<Tensor<double>>& inputs, double h);

/// Default step for a precision: 1e-3 for 32-bit, 1e-5 for 64-bit.
template <class T>
constexpr double default_step() {
  return sizeof(T) == 4 ? 1e-3 : 1e-5;
}

/// Acceptance threshold for a precision: 1e-3 for 32-bit, 1e-5 for 64-bit.
template <class T>
constexpr double tolerance() {
  return sizeof(T) == 4 ? 1e-3 : 1e-5;
}

/// Criss-cross attention as full HW x HW attention with an additive -1e30 mask
/// off the row/column of each position, plus residual. Projections are 1x1
/// convolutions given as [out x in] matrices and bias vectors. x is [B x C x H x W].
std::vector<double> dense_cross_attention_reference(const std::vector<double>& x, std::size_t batch,
                                                    std::size_t channels, std::size_t height, std::size_t width,
                                                    const std::vector<double>& wq, const std::vector<double>& bq,
                                                    const std::vector<double>& wk, const std::vector<double>& bk,
                                                    const std::vector<double>& wv, const std::vector<double>& bv,
                                                    std::size_t qk_channels);

/// s[b, c, h, w, u, v] by direct loops from its definition. x is [B x C x H x W].
std::vector<double> neighborhood_reference(const std::vector<double>& x, std::size_t batch, std::size_t channels,
                                           std::size_t height, std::size_t width, std::size_t u, std::size_t v);

enum class RefMetric { kCosine, kEuclidean, kManhattan };

/// Mean-pools each embedding [C x H x W] to C values, averages per class and
/// assigns every query to the nearest prototype (ties to the lowest class).
std::vector<std::size_t> protonet_reference(const std::vector<std::vector<double>>& support,
                                            const std::vector<std::size_t>& support_labels,
                                            const std::vector<std::vector<double>>& queries, std::size_t way,
                                            std::size_t channels, RefMetric metric);

/// Orthonormal DCT-II basis value from the closed form.
double dct_reference(std::size_t i, std::size_t j, std::size_t y, std::size_t x, std::size_t h, std::size_t w);

/// Mean and 1.96 * s / sqrt(n) with the n - 1 sample deviation.
std::pair<double, double> mean_ci95_reference(const std::vector<double>& values);

/// -log(exp(s_y / t) / sum_i exp(s_i / t)) evaluated directly in long double.
double softmax_ce_reference(const std::vector<double>& scores, std::size_t target, double t);

}  // namespace ficnet::testkit
