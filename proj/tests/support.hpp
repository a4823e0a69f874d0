#pragma once

// Generators and comparison helpers shared by the test programs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "ficnet/data_io.hpp"
#include "ficnet/parameter.hpp"
#include "ficnet/rng.hpp"
#include "ficnet/tensor.hpp"

namespace ficnet::test {

// Values are rounded through float so the same tensor can be built exactly in
// either precision.
inline std::vector<double> randn(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = double(float(scale * rng.normal()));
  return v;
}

inline std::vector<double> uniform(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = double(float(rng.uniform(lo, hi)));
  return v;
}

template <class T>
Tensor<T> make(const Shape& shape, const std::vector<double>& values) {
  return Tensor<T>(shape, std::vector<T>(values.begin(), values.end()));
}

template <class T>
Tensor<T> random_tensor(Rng& rng, const Shape& shape, double scale = 1.0) {
  return make<T>(shape, randn(rng, numel(shape), scale));
}

/// Extent in [lo, hi].
inline std::size_t extent(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + std::size_t(rng.below(hi - lo + 1));
}

inline Shape random_shape(Rng& rng, std::size_t rank, std::size_t lo, std::size_t hi) {
  Shape s(rank);
  for (auto& d : s) d = extent(rng, lo, hi);
  return s;
}

template <class T>
std::vector<double> values_of(const Tensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class T, class U>
double max_abs_diff(const Tensor<T>& a, const Tensor<U>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  return max_abs_diff(values_of(a), values_of(b));
}

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && a.values() == b.values();
}

/// Same names, shapes and bit-identical values.
template <class T>
bool same_params(const ParameterSet<T>& a, const ParameterSet<T>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.items()[i].name != b.items()[i].name || !bit_equal(a.items()[i].value, b.items()[i].value)) return false;
  }
  return true;
}

/// Synthetic classes [first, first + count) rendered in memory, without the
/// disk round trip.
inline ImageSplit synthetic_split(const SynthSpec& spec, std::size_t first, std::size_t count) {
  ImageSplit split;
  split.side = spec.side;
  for (std::size_t k = 0; k < count; ++k) {
    split.add_class(synth_class_name(first + k), k);
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      split.images.back().push_back(render_sample(spec, first + k, s).planes);
    }
  }
  return split;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::uint64_t(std::hash<std::string>{}(tag)) ^ std::uint64_t(::getpid()));
    path_ = std::filesystem::temp_directory_path() / ("ficnet-" + tag + "-" + std::to_string(rng.next_u64() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

}  // namespace ficnet::test
