#pragma once

// Episode sampling, the full FicNet forward pass, losses, meta-training and
// episodic evaluation.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ficnet/backbone.hpp"
#include "ficnet/dcm.hpp"
#include "ficnet/image_split.hpp"
#include "ficnet/mfn.hpp"

namespace ficnet {

enum class Metric { kCosine, kEuclidean, kManhattan };
Metric parse_metric(const std::string& name);
const char* metric_name(Metric metric);

/// Raised when training or evaluation cannot proceed on the given data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when training produces a non-finite loss or gradient.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Episode {
  std::size_t way = 0, shot = 0, queries = 0;
  std::vector<std::size_t> classes;        // split class per episode label
  std::vector<SampleRef> support;          // way * shot, grouped by episode label
  std::vector<std::size_t> support_labels;
  std::vector<SampleRef> query;            // way * queries, grouped by episode label
  std::vector<std::size_t> query_labels;
};

/// N classes uniformly without replacement, then K + P samples per class without
/// replacement; the first K are support.
Episode sample_episode(const ImageSplit& split, std::size_t way, std::size_t shot, std::size_t queries, Rng& rng);

struct ModelConfig {
  BackboneConfig backbone;
  MfnConfig mfn;
  DcmConfig dcm;
  bool use_mfn = true;
  std::size_t num_train_classes = 0;  // auxiliary classifier width; 0 disables it

  void validate() const;
};

template <class T>
struct EpisodeOutput {
  Tensor<T> scores;       // cosine scores [Q x N]
  DcmPairs<T> pairs;      // pair index i * Q + q
  Tensor<T> query_fused;  // F + F' of the queries, [Q x C x H x W]
  std::size_t way = 0;
  std::size_t queries = 0;
};

template <class T>
class FicNet {
 public:
  /// Parameters are drawn from `seed`.
  FicNet(ModelConfig config, FrequencyIndexSet freq, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const FrequencyIndexSet& frequencies() const { return freq_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }

  /// Training-mode pass: batch statistics over the whole episode, running
  /// statistics updated.
  EpisodeOutput<T> forward(const Tensor<T>& support, const std::vector<std::size_t>& support_labels,
                           const Tensor<T>& query, std::size_t way);

  /// Inference with running statistics; const and safe to call concurrently.
  EpisodeOutput<T> infer(const Tensor<T>& support, const std::vector<std::size_t>& support_labels,
                         const Tensor<T>& query, std::size_t way) const;

  /// Pipeline after the backbone; exposed so tests can feed embeddings directly.
  EpisodeOutput<T> head(const Tensor<T>& basic, const std::vector<std::size_t>& support_labels, std::size_t way) const;

 private:
  ModelConfig config_;
  FrequencyIndexSet freq_;
  Backbone<T> backbone_;
  std::optional<Mfn<T>> mfn_;
  ParameterSet<T> params_;
};

struct Classification {
  std::vector<double> scores;  // one per class
  std::size_t prediction = 0;  // argmax, ties to the lowest index
};

/// scores[i] = similarity(support[i], query[i]); euclidean and manhattan scores are
/// negated distances; a zero vector has cosine 0.
template <class T>
Classification classify(const std::vector<std::vector<T>>& support, const std::vector<std::vector<T>>& query,
                        Metric metric);

/// Predictions for every query of an episode output.
template <class T>
std::vector<std::size_t> predict(const EpisodeOutput<T>& out, Metric metric);

/// Cross entropy of fc(GAP(query_fused)) over the training classes.
template <class T>
Tensor<T> loss_aux(const Tensor<T>& query_fused, const std::vector<std::size_t>& global_labels,
                   const ParameterSet<T>& params);

/// Differentiable [Q x N] scores of an episode under `metric`: cosine similarity,
/// or the negated euclidean (squared) / manhattan distance.
template <class T>
Tensor<T> metric_scores(const EpisodeOutput<T>& out, Metric metric);

/// Softmax cross entropy of scores / t.
template <class T>
Tensor<T> loss_contrastive(const Tensor<T>& scores, const std::vector<std::size_t>& labels, double t);

template <class T>
Tensor<T> total_loss(const Tensor<T>& lc, const Tensor<T>& la, double mu);

struct TrainConfig {
  std::size_t way = 5, shot = 5, queries = 15;
  double mu = 0.7;
  double contrast_t = 0.2;
  double alpha = 0.1;
  std::size_t meta_batch = 4;
  std::size_t iterations = 1000;
  std::uint64_t seed = 0;
  bool halve_on_plateau = false;
  std::size_t val_every = 0;  // 0 disables periodic validation
  std::size_t val_episodes = 100;
  Metric metric = Metric::kCosine;           // validation metric
  Metric contrast_metric = Metric::kCosine;  // dis inside Lc

  void validate() const;
};

struct IterationRecord {
  std::size_t iter = 0;
  double loss = 0, lc = 0, la = 0;
};

struct TrainLog {
  std::vector<IterationRecord> iterations;
  std::vector<std::pair<std::size_t, double>> validation;  // (iter, mean accuracy)
};

/// Algorithm: per iteration sample `meta_batch` episodes from stream (seed, iter),
/// average L = Lc + mu La over them and take one SGD step. Log lines go to `log`
/// when given. Throws TrainingError on a non-finite loss.
template <class T>
TrainLog meta_train(FicNet<T>& model, const ImageSplit& train, const TrainConfig& config,
                    const ImageSplit* val = nullptr, std::ostream* log = nullptr);

struct EvalConfig {
  std::size_t episodes = 1200;
  std::size_t way = 5, shot = 5, queries = 15;
  Metric metric = Metric::kCosine;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

struct EvalReport {
  std::size_t episodes = 0;
  std::vector<double> per_episode_acc;
  double mean_acc = 0;
  double ci95 = 0;
  Metric metric = Metric::kCosine;
  std::string config;

  /// `episodes=`, `mean_acc=`, `ci95=`, `metric=` lines, then `ep <i> <acc>` lines.
  std::string to_text() const;
};

/// Mean and 1.96 * sample standard deviation / sqrt(n).
EvalReport summarize(const std::vector<double>& per_episode_acc, Metric metric);

/// Episode e draws from stream (seed, e), so results do not depend on `jobs`.
template <class T>
EvalReport evaluate(const FicNet<T>& model, const ImageSplit& split, const EvalConfig& config);

struct FreqSelectConfig {
  std::size_t grid_h = 5, grid_w = 5;
  std::size_t m = 12;
  TrainConfig train;              // budget for each candidate
  std::size_t eval_episodes = 50;
};

struct FreqSelection {
  FrequencyIndexSet selected;
  std::vector<double> scores;  // row-major grid_h x grid_w validation accuracies
};

/// Trains and validates one M = 1 model per candidate frequency with identical
/// seeds and budgets, then keeps the top m.
template <class T>
FreqSelection select_frequency_indices(const ModelConfig& base, const ImageSplit& train, const ImageSplit& val,
                                       const FreqSelectConfig& config, std::ostream* log = nullptr);

}  // namespace ficnet
