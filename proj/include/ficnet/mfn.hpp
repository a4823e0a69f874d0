#pragma once

// Multi-frequency neighborhood: self-similarity of each position with its
// distance-weighted neighbors, channel attention from selected 2-D DCT
// components, and a 3-D convolutional reduction of the neighborhood axes.

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "ficnet/feature_map.hpp"
#include "ficnet/ops.hpp"
#include "ficnet/parameter.hpp"

namespace ficnet {

struct MfnConfig {
  std::size_t window_u = 5;
  std::size_t window_v = 5;
  std::size_t num_freq = 12;  // M
  std::size_t freq_h = 5;     // scored frequency grid
  std::size_t freq_w = 5;

  void validate(std::size_t channels) const;
};

struct FrequencyEntry {
  std::size_t i = 0;
  std::size_t j = 0;
  double score = 0.0;

  bool operator==(const FrequencyEntry&) const = default;
};

/// Ordered 2-D DCT indices used by the channel groups, best score first.
class FrequencyIndexSet {
 public:
  FrequencyIndexSet() = default;
  FrequencyIndexSet(std::vector<FrequencyEntry> entries, std::size_t grid_h, std::size_t grid_w);

  /// Top-m candidates of a row-major grid_h x grid_w score table. Ties go to the
  /// lower row, then the lower column.
  static FrequencyIndexSet from_scores(const std::vector<double>& scores, std::size_t grid_h,
                                       std::size_t grid_w, std::size_t m);

  /// Low frequencies first: ranked by i + j, then by i. Scores are -(i + j).
  static FrequencyIndexSet low_first(std::size_t m, std::size_t grid_h, std::size_t grid_w);

  std::size_t size() const { return entries_.size(); }
  const std::vector<FrequencyEntry>& entries() const { return entries_; }
  const FrequencyEntry& operator[](std::size_t m) const { return entries_[m]; }
  std::size_t grid_h() const { return grid_h_; }
  std::size_t grid_w() const { return grid_w_; }

  /// `MFN-FREQ v1 M=<M> grid=<H>x<W>` header, then one `m i j score` line per entry.
  std::string to_text() const;
  static FrequencyIndexSet from_text(const std::string& text);
  void save(const std::string& path) const;
  static FrequencyIndexSet load(const std::string& path);

  bool operator==(const FrequencyIndexSet&) const = default;

 private:
  void validate() const;
  std::vector<FrequencyEntry> entries_;
  std::size_t grid_h_ = 0;
  std::size_t grid_w_ = 0;
};

/// Orthonormal 2-D DCT-II basis: table(i, j, h, w) for an H x W grid.
template <class T>
class DctBasis {
 public:
  DctBasis() = default;
  DctBasis(std::size_t h, std::size_t w);

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  T operator()(std::size_t i, std::size_t j, std::size_t y, std::size_t x) const {
    return table_[((i * w_ + j) * h_ + y) * w_ + x];
  }
  /// Basis image for frequency (i, j) as h*w values.
  std::vector<T> image(std::size_t i, std::size_t j) const;

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<T> table_;
};

template <class T>
DctBasis<T> build_dct_basis(std::size_t h, std::size_t w) {
  return DctBasis<T>(h, w);
}

/// First channel and channel count of group m when c channels are split into
/// `groups` contiguous blocks; the first c % groups blocks take one extra channel.
struct ChannelGroup {
  std::size_t begin = 0;
  std::size_t count = 0;
};
ChannelGroup channel_group(std::size_t channels, std::size_t groups, std::size_t m);

/// s[b, c, h, w, u, v]: elementwise product of the unit-normalized fiber at (h, w)
/// and the unit-normalized, distance-weighted fiber at (h + u - U/2, w + v - V/2).
/// Neighbors outside the map contribute zero.
template <class T>
Tensor<T> weighted_neighborhood(const Tensor<T>& features, std::size_t u, std::size_t v);

/// out[b, c] = sum_{h,w} s_hat[b, c, h, w] * B(i_m, j_m, h, w) for c in group m.
template <class T>
Tensor<T> dct_frequency_features(const Tensor<T>& s_hat, const DctBasis<T>& basis,
                                 const FrequencyIndexSet& freq);

/// sigmoid(fc(freq)), freq [B x C].
template <class T>
Tensor<T> multifreq_attention(const Tensor<T>& freq, const Tensor<T>& fc_weight, const Tensor<T>& fc_bias);

/// Collapses the U x V axes of [B x C x H x W x U x V] with (1,3,3) valid 3-D
/// convolutions C -> C/2 -> C, ReLU after each. U = V = 5 uses two convolutions,
/// U = V = 1 is a pass-through.
template <class T>
Tensor<T> reduce_neighborhood(const Tensor<T>& s_weighted, const ParameterSet<T>& params);

template <class T>
struct MfnOutput {
  FeatureMap<T> reduced;  // F'
  FeatureMap<T> fused;    // F + F'
  Tensor<T> attention;    // D, [B x C]
  Tensor<T> neighborhood; // s, [B x C x H x W x U x V]
};

template <class T>
class Mfn {
 public:
  Mfn(MfnConfig config, std::size_t channels, FrequencyIndexSet freq);

  const MfnConfig& config() const { return config_; }
  const FrequencyIndexSet& frequencies() const { return freq_; }
  const DctBasis<T>& basis() const { return basis_; }

  /// Adds "mfn.*" parameters.
  void init_params(ParameterSet<T>& params, Rng& rng) const;

  MfnOutput<T> forward(const FeatureMap<T>& features, const ParameterSet<T>& params) const;

  /// Attention-weighted neighborhood before the reduction; exposed for tests.
  Tensor<T> weighted_input(const FeatureMap<T>& features, const ParameterSet<T>& params,
                           Tensor<T>* attention = nullptr, Tensor<T>* neighborhood = nullptr) const;

 private:
  MfnConfig config_;
  std::size_t channels_;
  FrequencyIndexSet freq_;
  DctBasis<T> basis_;
};

}  // namespace ficnet
