#pragma once

// Files: class-per-directory image corpora (binary PPM), the FICT tensor
// container, checkpoints, and the synthetic fine-grained bird generator.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ficnet/episodic.hpp"
#include "ficnet/image_split.hpp"
#include "ficnet/tensor.hpp"

namespace ficnet {

/// Malformed or unreadable file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { kTrain, kVal, kTest };
Split parse_split(const std::string& token);
const char* split_name(Split split);

struct DatasetIndex {
  struct ClassEntry {
    std::string name;
    Split split = Split::kTrain;
    std::vector<std::filesystem::path> samples;  // sorted
  };
  std::filesystem::path root;
  std::vector<ClassEntry> classes;  // sorted by name

  std::size_t sample_count() const;
  std::vector<const ClassEntry*> classes_in(Split split) const;
};

/// `class_name<TAB>split` lines; blank lines and `#` comments are skipped.
std::vector<std::pair<std::string, Split>> read_split_file(const std::filesystem::path& path);
void write_split_file(const std::filesystem::path& path, const std::vector<std::pair<std::string, Split>>& entries);

/// Classes named by the split file, each a directory of .ppm / .fict samples.
DatasetIndex scan_dataset(const std::filesystem::path& root, const std::filesystem::path& split_file);

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<float> planes;  // 3 x height x width in [0, 1]
};

RgbImage read_ppm(const std::filesystem::path& path);
RgbImage decode_ppm(const std::string& bytes);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);
std::string encode_ppm(const RgbImage& image);

/// Bilinear resampling, pixel centers at half-integers (align-corners false).
RgbImage resize_bilinear(const RgbImage& image, std::size_t width, std::size_t height);

/// A PPM or FICT image as [3 x side x side], resized when needed.
Tensor<float> load_image(const std::filesystem::path& path, std::size_t side);

/// Decodes every sample of one split.
ImageSplit load_split(const DatasetIndex& index, Split split, std::size_t side);

// FICT: "FICT" | u32 version | u8 dtype (1 = real32, 2 = real64) | u8 rank |
// 6 x u64 dims | row-major little-endian payload.
template <class T>
std::string encode_tensor(const Tensor<T>& t);
/// real32 payloads widen exactly into double; real64 into float is rejected.
template <class T>
Tensor<T> decode_tensor(const std::string& bytes);
template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);
template <class T>
Tensor<T> load_tensor(const std::filesystem::path& path);

template <class T>
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::string config_text;
  std::string freq_text;
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;  // parameters, then batch-norm buffers
};

template <class T>
std::string encode_checkpoint(const Checkpoint<T>& ckpt);
template <class T>
Checkpoint<T> decode_checkpoint(const std::string& bytes);
template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt);
template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Snapshot of a model's parameters and batch-norm running statistics.
template <class T>
Checkpoint<T> make_checkpoint(const FicNet<T>& model, std::string config_text, std::uint64_t seed,
                              std::uint64_t iteration);
/// Copies checkpoint values into a model built from the same configuration.
template <class T, class U>
void restore_checkpoint(FicNet<T>& model, const Checkpoint<U>& ckpt);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthSpec {
  std::size_t num_classes = 20;
  std::size_t samples_per_class = 30;
  std::size_t side = 32;
  std::uint64_t seed = 0;
  std::size_t beak_bins = 5;        // angles evenly spaced over [-max_beak_deg, +max_beak_deg]
  double max_beak_deg = 20.0;
  std::size_t max_stripes = 4;      // stripe counts 1..max_stripes
  double max_shift = 0.15;          // fraction of the half-side
  double max_rotation_deg = 4.0;    // below the beak bin spacing, so pose cannot mimic a class
  double min_scale = 0.9, max_scale = 1.1;
  std::size_t num_backgrounds = 4;  // texture ids 0..3
  std::size_t val_classes = 0;      // 0 picks a quarter of the classes
  std::size_t test_classes = 0;     // 0 picks a quarter of the classes

  void validate() const;
  std::size_t resolved_val() const;
  std::size_t resolved_test() const;
};

/// Class-identity cues of one class.
struct BirdClass {
  double beak_deg = 0;
  std::size_t stripes = 1;
};
BirdClass synth_class(const SynthSpec& spec, std::size_t cls);

/// Per-image nuisance draw.
struct Nuisance {
  double shift_x = 0, shift_y = 0, rotation_deg = 0, scale = 1;
  std::size_t background = 0;
  std::uint64_t texture_seed = 0;
  double body_rgb[3] = {0.5, 0.5, 0.5};
};
Nuisance draw_nuisance(const SynthSpec& spec, Rng& rng);

RgbImage render_bird(const SynthSpec& spec, const BirdClass& bird, const Nuisance& nuisance);

/// Image `sample` of class `cls`; each image has its own random stream.
RgbImage render_sample(const SynthSpec& spec, std::size_t cls, std::size_t sample);

struct SynthStats {
  double inter_l1 = 0;          // same nuisance, adjacent beak bins
  double intra_l1 = 0;          // same class, independent nuisances
  double signal_variance = 0;   // per-pixel variance of class means
  double nuisance_variance = 0; // mean per-pixel within-class variance
};
SynthStats measure_synthetic(const SynthSpec& spec, std::size_t pairs = 64);

/// Writes `<out>/<class>/<sample>.ppm`, `<out>/split.txt` and `<out>/manifest.txt`.
DatasetIndex generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir);

std::string synth_class_name(std::size_t cls);

}  // namespace ficnet
