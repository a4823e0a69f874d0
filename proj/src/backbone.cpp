#include "ficnet/backbone.hpp"

namespace ficnet {

std::size_t BackboneConfig::output_side() const {
  std::size_t side = input_side;
  for (std::size_t b = 0; b < num_blocks; ++b) {
    if (side < 2) return 0;
    side /= 2;  // conv keeps the side, the pool floors it
  }
  return side;
}

void BackboneConfig::validate() const {
  if (in_channels == 0 || block_channels == 0 || num_blocks == 0) {
    throw ConfigError("backbone extents must be positive");
  }
  if (output_side() < 2) {
    throw ConfigError("input side " + std::to_string(input_side) + " leaves an embedding smaller than 2x2");
  }
}

template <class T>
Backbone<T>::Backbone(BackboneConfig config) : config_(config) {
  config_.validate();
  bn_.assign(config_.num_blocks, BatchNormState<T>(config_.block_channels));
}

template <class T>
std::string Backbone<T>::param_name(std::size_t block, const char* leaf) {
  return "backbone.block" + std::to_string(block) + "." + leaf;
}

template <class T>
void Backbone<T>::init_params(ParameterSet<T>& params, Rng& rng) const {
  const std::size_t c = config_.block_channels;
  for (std::size_t b = 0; b < config_.num_blocks; ++b) {
    const std::size_t cin = b == 0 ? config_.in_channels : c;
    params.add(param_name(b, "conv.weight"), kaiming_uniform<T>({c, cin, 3, 3}, cin * 9, rng));
    params.add(param_name(b, "bn.gamma"), Tensor<T>::full({c}, T(1)));
    params.add(param_name(b, "bn.beta"), Tensor<T>::zeros({c}));
  }
}

template <class T>
FeatureMap<T> Backbone<T>::embed(const Tensor<T>& images, const ParameterSet<T>& params, bool training) {
  return run(images, params, training, bn_);
}

template <class T>
FeatureMap<T> Backbone<T>::embed(const Tensor<T>& images, const ParameterSet<T>& params) const {
  std::vector<BatchNormState<T>> bn = bn_;
  return run(images, params, false, bn);
}

template <class T>
FeatureMap<T> Backbone<T>::run(const Tensor<T>& images, const ParameterSet<T>& params, bool training,
                               std::vector<BatchNormState<T>>& bn) const {
  if (images.rank() != 4 || images.dim(1) != config_.in_channels || images.dim(2) != config_.input_side ||
      images.dim(3) != config_.input_side) {
    throw ShapeError("backbone expects [B x " + std::to_string(config_.in_channels) + " x " +
                     std::to_string(config_.input_side) + " x " + std::to_string(config_.input_side) +
                     "], got " + shape_string(images.shape()));
  }
  Tensor<T> x = images;
  for (std::size_t b = 0; b < config_.num_blocks; ++b) {
    // No conv bias: batch statistics would cancel it.
    x = conv2d(x, params.get(param_name(b, "conv.weight")), std::optional<Tensor<T>>(), 1, 1);
    x = batch_norm2d(x, params.get(param_name(b, "bn.gamma")), params.get(param_name(b, "bn.beta")), bn[b],
                     training);
    x = relu(x);
    x = max_pool2d(x, 2, 2);
  }
  return FeatureMap<T>(x, Stage::kBasic);
}

template <class T>
ParameterSet<T> init_backbone_params(const BackboneConfig& config, std::uint64_t seed) {
  ParameterSet<T> params;
  Rng rng(seed);
  Backbone<T>(config).init_params(params, rng);
  return params;
}

template class Backbone<float>;
template class Backbone<double>;
template ParameterSet<float> init_backbone_params<float>(const BackboneConfig&, std::uint64_t);
template ParameterSet<double> init_backbone_params<double>(const BackboneConfig&, std::uint64_t);

}  // namespace ficnet
