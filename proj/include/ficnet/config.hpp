#pragma once

// Flat key=value run configuration shared by every command. A file supplies
// a base; command-line flags are applied on top of it.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ficnet/episodic.hpp"

namespace ficnet {

struct RunConfig {
  // data
  std::string data_dir;
  std::string split_file;  // empty: <data_dir>/split.txt
  std::string freq_file;   // empty: lowest frequencies first
  std::string out_dir = ".";
  std::size_t side = 32;

  // backbone
  std::size_t channels = 64;  // C
  std::size_t blocks = 4;

  // mfn
  std::size_t num_freq = 12;  // M
  std::size_t window = 5;     // U = V

  // dcm
  std::size_t loops = 2;       // L
  std::size_t qk_ratio = 8;    // C / C''
  double temperature = 2.0;    // T

  bool use_mfn = true;
  bool use_bcc = true;
  bool use_dca = true;
  bool aux_loss = true;

  // training
  std::size_t way = 5, shot = 5, queries = 15;  // N, K, P
  double mu = 0.7;
  double contrast_t = 0.2;  // t
  double alpha = 0.1;
  std::size_t meta_batch = 4;
  std::size_t iterations = 1000;
  bool halve_on_plateau = false;
  std::size_t val_every = 0;
  std::size_t val_episodes = 100;
  Metric metric = Metric::kCosine;
  Metric contrast_metric = Metric::kCosine;

  // evaluation
  std::size_t episodes = 1200;
  std::size_t jobs = 1;

  std::uint64_t seed = 0;
  std::size_t precision = 32;  // bits of the model's scalars: 32 or 64

  /// Sets one field from its textual value. Unknown keys and malformed values
  /// throw ConfigError.
  void set(const std::string& key, const std::string& value);
  /// Applies `key=value` lines; blank lines and `#` comments are skipped.
  void merge_text(const std::string& text);
  void merge_file(const std::string& path);
  std::string to_text() const;

  static std::vector<std::string> keys();

  ModelConfig model_config(std::size_t num_train_classes) const;
  TrainConfig train_config() const;
  EvalConfig eval_config() const;
  std::string resolved_split_file() const;
};

RunConfig parse_run_config(const std::string& text);

}  // namespace ficnet
