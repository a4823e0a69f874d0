#pragma once

// Double-cross modulation: two shared-parameter rounds of criss-cross attention
// (row + column context), then a support/query cosine correlation refined by
// 3-D convolutions over the tensor and its transpose, turned into one spatial
// attention map per side.

#include <cstddef>
#include <vector>

#include "ficnet/feature_map.hpp"
#include "ficnet/ops.hpp"
#include "ficnet/parameter.hpp"

namespace ficnet {

struct DcmConfig {
  std::size_t loops = 2;        // L
  std::size_t qk_ratio = 8;     // C'' = C / qk_ratio
  double temperature = 2.0;     // T
  bool use_bcc = true;
  bool use_dca = true;

  void validate(std::size_t channels) const;
};

/// Aggregates values along the cross path of every position. q, k are
/// [B x C'' x H x W], v is [B x Cv x H x W]. For position p the cross path is the
/// W positions of p's row followed by the H - 1 other positions of its column;
/// out[:, p] = sum_i softmax_i(<q_p, k_i>) v_i.
template <class T>
Tensor<T> criss_cross_aggregate(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

/// Attention weights of criss_cross_aggregate, [B x H x W x (H + W - 1)], no gradient.
template <class T>
std::vector<T> criss_cross_weights(const Tensor<T>& q, const Tensor<T>& k);

/// One criss-cross round on [B x C x H x W]: 1x1 query/key/value projections,
/// cross-path aggregation, residual.
template <class T>
Tensor<T> crisscross_step(const Tensor<T>& x, const ParameterSet<T>& params);

/// F* = F'' + F' where F'' is `loops` shared-parameter rounds starting from F.
template <class T>
Tensor<T> bcc(const Tensor<T>& basic, const Tensor<T>& prime, const ParameterSet<T>& params, std::size_t loops);

/// Per-class mean of [B x ...] rows. labels[b] in [0, n); every class needs a row.
/// Rows are accumulated in increasing row order.
template <class T>
Tensor<T> class_prototypes(const Tensor<T>& x, const std::vector<std::size_t>& labels, std::size_t n);

/// Cosine correlation of every support/query position pair. support and query are
/// [P x C x H x W]; the result is [P x HW x HW] indexed (pair, x_s, x_q).
template <class T>
Tensor<T> correlation_4d(const Tensor<T>& support, const Tensor<T>& query);

/// All (class, query) pairs at once: prototypes [N x C x H x W], queries
/// [Q x C x H x W] -> [N*Q x HW x HW], pair index i * Q + q.
template <class T>
Tensor<T> correlation_pairs(const Tensor<T>& prototypes, const Tensor<T>& queries);

/// Swaps the two position axes of [P x HW x HW].
template <class T>
Tensor<T> transpose_positions(const Tensor<T>& a);

/// Two-stage 3-D convolutional refinement of [P x HW x HW] correlations with
/// support grid h x w. Stage one applies "dcm.dca.conv1" to A and to its transpose
/// and sums (transposing back); stage two applies "dcm.dca.conv_a" to A1 and
/// "dcm.dca.conv_b" to the transpose of A1.
template <class T>
Tensor<T> dca_refine(const Tensor<T>& a, std::size_t h, std::size_t w, const ParameterSet<T>& params);

enum class Side { kSupport, kQuery };

/// softmax over the positions of `side` of the mean over the other side's
/// positions, divided by temperature. [P x HW x HW] -> [P x HW].
template <class T>
Tensor<T> attention_from_correlation(const Tensor<T>& refined, Side side, double temperature);

/// Attention-weighted spatial pooling: features [P x C x H x W], attention
/// [P x HW] -> [P x C].
template <class T>
Tensor<T> modulate(const Tensor<T>& features, const Tensor<T>& attention);

template <class T>
struct DcmPairs {
  Tensor<T> support;            // F-hat of the class side, [N*Q x C]
  Tensor<T> query;              // F-hat of the query side, [N*Q x C]
  Tensor<T> support_attention;  // [N*Q x HW]
  Tensor<T> query_attention;    // [N*Q x HW]
};

/// Modulated representations of every (class i, query q) pair, index i * Q + q.
template <class T>
DcmPairs<T> dcm_forward(const Tensor<T>& prototypes, const Tensor<T>& queries, const ParameterSet<T>& params,
                        const DcmConfig& config);

/// Adds "dcm.*" parameters: criss-cross projections when BCC is on, DCA kernels
/// when DCA is on.
template <class T>
void init_dcm_params(ParameterSet<T>& params, const DcmConfig& config, std::size_t channels, Rng& rng);

}  // namespace ficnet
