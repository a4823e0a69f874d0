#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ficnet/tensor.hpp"

namespace ficnet {

/// Decoded images of one dataset split, grouped by class. Each image is 3 x S x S
/// values in [0, 1], row-major.
struct ImageSplit {
  std::size_t side = 0;
  std::vector<std::string> class_names;
  /// Label used by the auxiliary classifier (position among the training classes).
  std::vector<std::size_t> global_ids;
  std::vector<std::vector<std::vector<float>>> images;

  std::size_t num_classes() const { return images.size(); }
  std::size_t image_size() const { return 3 * side * side; }
  void add_class(std::string name, std::size_t global_id) {
    class_names.push_back(std::move(name));
    global_ids.push_back(global_id);
    images.emplace_back();
  }
};

struct SampleRef {
  std::size_t cls = 0;     // class position within the split
  std::size_t sample = 0;  // sample position within the class
};

/// Stacks the referenced images into [B x 3 x S x S].
template <class T>
Tensor<T> stack_images(const ImageSplit& split, const std::vector<SampleRef>& refs) {
  const std::size_t n = split.image_size();
  std::vector<T> values(refs.size() * n);
  for (std::size_t r = 0; r < refs.size(); ++r) {
    const auto& img = split.images.at(refs[r].cls).at(refs[r].sample);
    for (std::size_t i = 0; i < n; ++i) values[r * n + i] = static_cast<T>(img[i]);
  }
  return Tensor<T>({refs.size(), 3, split.side, split.side}, std::move(values));
}

}  // namespace ficnet
