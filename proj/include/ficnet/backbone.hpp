#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ficnet/feature_map.hpp"
#include "ficnet/ops.hpp"
#include "ficnet/parameter.hpp"

namespace ficnet {

/// ConvNet-4: four blocks of conv3x3(pad 1) -> batch norm -> ReLU -> max pool 2x2.
struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t block_channels = 64;
  std::size_t num_blocks = 4;
  std::size_t input_side = 32;

  /// Spatial side of the embedding, or 0 when a pool would see fewer than 2 pixels.
  std::size_t output_side() const;
  void validate() const;
};

template <class T>
class Backbone {
 public:
  explicit Backbone(BackboneConfig config);

  const BackboneConfig& config() const { return config_; }

  /// Adds "backbone.*" parameters drawn from `rng`.
  void init_params(ParameterSet<T>& params, Rng& rng) const;

  /// images: [B x 3 x S x S] with values in [0, 1]. Training mode uses batch
  /// statistics and updates the running statistics.
  FeatureMap<T> embed(const Tensor<T>& images, const ParameterSet<T>& params, bool training);

  /// Inference with the running statistics; leaves the layer state untouched, so
  /// concurrent calls are safe.
  FeatureMap<T> embed(const Tensor<T>& images, const ParameterSet<T>& params) const;

  std::vector<BatchNormState<T>>& bn_states() { return bn_; }
  const std::vector<BatchNormState<T>>& bn_states() const { return bn_; }

  static std::string param_name(std::size_t block, const char* leaf);

 private:
  FeatureMap<T> run(const Tensor<T>& images, const ParameterSet<T>& params, bool training,
                    std::vector<BatchNormState<T>>& bn) const;

  BackboneConfig config_;
  std::vector<BatchNormState<T>> bn_;
};

/// Fresh backbone parameter set; identical for identical seeds.
template <class T>
ParameterSet<T> init_backbone_params(const BackboneConfig& config, std::uint64_t seed);

}  // namespace ficnet
