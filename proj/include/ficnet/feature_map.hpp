#pragma once

#include <cstddef>
#include <stdexcept>

#include "ficnet/tensor.hpp"

namespace ficnet {

/// Where a feature map sits in the pipeline.
enum class Stage { kBasic, kMultiFreq, kContext, kModulated, kFinal };

/// A batch of C x H x W embeddings stored as [B x C x H x W].
template <class T>
struct FeatureMap {
  Tensor<T> tensor;
  Stage stage = Stage::kBasic;

  FeatureMap() = default;
  FeatureMap(Tensor<T> t, Stage s) : tensor(std::move(t)), stage(s) {
    if (tensor.rank() != 4 || tensor.dim(1) == 0 || tensor.dim(2) == 0 || tensor.dim(3) == 0) {
      throw ShapeError("feature map must be [B x C x H x W] with positive extents, got " +
                       shape_string(tensor.shape()));
    }
  }

  std::size_t batch() const { return tensor.dim(0); }
  std::size_t channels() const { return tensor.dim(1); }
  std::size_t height() const { return tensor.dim(2); }
  std::size_t width() const { return tensor.dim(3); }
};

/// Invalid model or run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace ficnet
