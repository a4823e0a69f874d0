#include "ficnet/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <ostream>
#include <sstream>

namespace ficnet {

Metric parse_metric(const std::string& name) {
  if (name == "cosine") return Metric::kCosine;
  if (name == "euclidean") return Metric::kEuclidean;
  if (name == "manhattan") return Metric::kManhattan;
  throw ConfigError("unknown metric '" + name + "' (expected cosine, euclidean or manhattan)");
}

const char* metric_name(Metric metric) {
  switch (metric) {
    case Metric::kCosine: return "cosine";
    case Metric::kEuclidean: return "euclidean";
    case Metric::kManhattan: return "manhattan";
  }
  return "?";
}

Episode sample_episode(const ImageSplit& split, std::size_t way, std::size_t shot, std::size_t queries, Rng& rng) {
  if (way == 0 || shot == 0 || queries == 0) throw ConfigError("way, shot and queries must be positive");
  if (split.num_classes() < way) {
    throw DataError("split has " + std::to_string(split.num_classes()) + " classes, episode needs " +
                    std::to_string(way));
  }
  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.queries = queries;
  ep.classes = rng.choose(split.num_classes(), way);
  for (std::size_t label = 0; label < way; ++label) {
    const std::size_t cls = ep.classes[label];
    const std::size_t available = split.images[cls].size();
    if (available < shot + queries) {
      throw DataError("class '" + split.class_names[cls] + "' has " + std::to_string(available) +
                      " samples, episode needs " + std::to_string(shot + queries));
    }
    const auto picks = rng.choose(available, shot + queries);
    for (std::size_t k = 0; k < shot; ++k) {
      ep.support.push_back({cls, picks[k]});
      ep.support_labels.push_back(label);
    }
    for (std::size_t k = shot; k < shot + queries; ++k) {
      ep.query.push_back({cls, picks[k]});
      ep.query_labels.push_back(label);
    }
  }
  return ep;
}

void ModelConfig::validate() const {
  backbone.validate();
  if (use_mfn) mfn.validate(backbone.block_channels);
  dcm.validate(backbone.block_channels);
}

// ---------------------------------------------------------------------------
// Model

template <class T>
FicNet<T>::FicNet(ModelConfig config, FrequencyIndexSet freq, std::uint64_t seed)
    : config_(config), freq_(std::move(freq)), backbone_(config.backbone) {
  config_.validate();
  const std::size_t c = config_.backbone.block_channels;
  // Separate streams per module keep a module's initialization independent of
  // which other modules are enabled.
  Rng backbone_rng(derive_seed(seed, 1));
  backbone_.init_params(params_, backbone_rng);
  if (config_.use_mfn) {
    mfn_.emplace(config_.mfn, c, freq_);
    Rng rng(derive_seed(seed, 2));
    mfn_->init_params(params_, rng);
  }
  Rng dcm_rng(derive_seed(seed, 3));
  init_dcm_params(params_, config_.dcm, c, dcm_rng);
  if (config_.num_train_classes > 0) {
    Rng rng(derive_seed(seed, 4));
    params_.add("aux.fc.weight", kaiming_uniform<T>({config_.num_train_classes, c}, c, rng));
    params_.add("aux.fc.bias", Tensor<T>::zeros({config_.num_train_classes}));
  }
}

template <class T>
EpisodeOutput<T> FicNet<T>::forward(const Tensor<T>& support, const std::vector<std::size_t>& support_labels,
                                    const Tensor<T>& query, std::size_t way) {
  const FeatureMap<T> basic = backbone_.embed(concat<T>({support, query}), params_, true);
  return head(basic.tensor, support_labels, way);
}

template <class T>
EpisodeOutput<T> FicNet<T>::infer(const Tensor<T>& support, const std::vector<std::size_t>& support_labels,
                                  const Tensor<T>& query, std::size_t way) const {
  const FeatureMap<T> basic = backbone_.embed(concat<T>({support, query}), params_);
  return head(basic.tensor, support_labels, way);
}

namespace {

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> r(end - begin);
  std::iota(r.begin(), r.end(), begin);
  return r;
}

}  // namespace

template <class T>
EpisodeOutput<T> FicNet<T>::head(const Tensor<T>& basic, const std::vector<std::size_t>& support_labels,
                                 std::size_t way) const {
  const FeatureMap<T> f(basic, Stage::kBasic);
  const std::size_t nk = support_labels.size(), total = f.batch();
  if (nk == 0 || nk >= total) throw ShapeError("episode needs both support and query rows");

  std::optional<Tensor<T>> prime;
  Tensor<T> fused = basic;
  if (mfn_) {
    MfnOutput<T> m = mfn_->forward(f, params_);
    prime = m.reduced.tensor;
    fused = m.fused.tensor;
  }
  Tensor<T> star = basic;
  if (config_.dcm.use_bcc) {
    for (std::size_t l = 0; l < config_.dcm.loops; ++l) star = crisscross_step(star, params_);
  }
  if (prime) star = add(star, *prime);

  const Tensor<T> support_star = index_select(star, range(0, nk));
  const Tensor<T> query_star = index_select(star, range(nk, total));
  const Tensor<T> prototypes = class_prototypes(support_star, support_labels, way);

  EpisodeOutput<T> out;
  out.way = way;
  out.queries = total - nk;
  out.pairs = dcm_forward(prototypes, query_star, params_, config_.dcm);
  const Tensor<T> cos = sum(mul(l2_normalize(out.pairs.support, 1), l2_normalize(out.pairs.query, 1)), 1);
  out.scores = permute(reshape(cos, {way, out.queries}), {1, 0});
  out.query_fused = index_select(fused, range(nk, total));
  return out;
}

// ---------------------------------------------------------------------------
// Classification and losses

template <class T>
Classification classify(const std::vector<std::vector<T>>& support, const std::vector<std::vector<T>>& query,
                        Metric metric) {
  if (support.size() != query.size() || support.empty()) throw ShapeError("classify: one pair per class required");
  Classification out;
  for (std::size_t i = 0; i < support.size(); ++i) {
    const auto& a = support[i];
    const auto& b = query[i];
    if (a.size() != b.size()) throw ShapeError("classify: pair vectors differ in length");
    double score = 0;
    if (metric == Metric::kCosine) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t c = 0; c < a.size(); ++c) {
        dot += double(a[c]) * double(b[c]);
        na += double(a[c]) * double(a[c]);
        nb += double(b[c]) * double(b[c]);
      }
      score = (na > 0 && nb > 0) ? dot / (std::sqrt(na) * std::sqrt(nb)) : 0.0;
    } else if (metric == Metric::kEuclidean) {
      double d = 0;
      for (std::size_t c = 0; c < a.size(); ++c) d += (double(a[c]) - double(b[c])) * (double(a[c]) - double(b[c]));
      score = -std::sqrt(d);
    } else {
      double d = 0;
      for (std::size_t c = 0; c < a.size(); ++c) d += std::abs(double(a[c]) - double(b[c]));
      score = -d;
    }
    out.scores.push_back(score);
    if (score > out.scores[out.prediction]) out.prediction = i;
  }
  return out;
}

template <class T>
std::vector<std::size_t> predict(const EpisodeOutput<T>& out, Metric metric) {
  const std::size_t n = out.way, nq = out.queries, c = out.pairs.support.dim(1);
  const auto& s = out.pairs.support.values();
  const auto& q = out.pairs.query.values();
  std::vector<std::size_t> predictions(nq);
  std::vector<std::vector<T>> sv(n), qv(n);
  for (std::size_t j = 0; j < nq; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = (i * nq + j) * c;
      sv[i].assign(s.begin() + std::ptrdiff_t(row), s.begin() + std::ptrdiff_t(row + c));
      qv[i].assign(q.begin() + std::ptrdiff_t(row), q.begin() + std::ptrdiff_t(row + c));
    }
    predictions[j] = classify(sv, qv, metric).prediction;
  }
  return predictions;
}

template <class T>
Tensor<T> loss_aux(const Tensor<T>& query_fused, const std::vector<std::size_t>& global_labels,
                   const ParameterSet<T>& params) {
  if (query_fused.rank() != 4) throw ShapeError("loss_aux expects [Q x C x H x W]");
  const Tensor<T>& weight = params.get("aux.fc.weight");
  for (std::size_t label : global_labels) {
    if (label >= weight.dim(0)) {
      throw ConfigError("auxiliary label " + std::to_string(label) + " outside " + std::to_string(weight.dim(0)) +
                        " training classes");
    }
  }
  const std::size_t q = query_fused.dim(0), c = query_fused.dim(1), hw = query_fused.dim(2) * query_fused.dim(3);
  const Tensor<T> pooled = mean(reshape(query_fused, {q, c, hw}), 2);
  return cross_entropy(linear(pooled, weight, std::optional<Tensor<T>>(params.get("aux.fc.bias"))), global_labels);
}

template <class T>
Tensor<T> metric_scores(const EpisodeOutput<T>& out, Metric metric) {
  if (metric == Metric::kCosine) return out.scores;
  const Tensor<T> diff = sub(out.pairs.support, out.pairs.query);
  const Tensor<T> dist = metric == Metric::kEuclidean
                             ? sum(mul(diff, diff), 1)
                             : sum(add(relu(diff), relu(scale(diff, T(-1)))), 1);
  return permute(reshape(scale(dist, T(-1)), {out.way, out.queries}), {1, 0});
}

template <class T>
Tensor<T> loss_contrastive(const Tensor<T>& scores, const std::vector<std::size_t>& labels, double t) {
  if (!(t > 0.0)) throw ConfigError("contrastive temperature must be positive");
  return cross_entropy(scale(scores, T(1.0 / t)), labels);
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& lc, const Tensor<T>& la, double mu) {
  if (!(mu >= 0.0)) throw ConfigError("loss weight mu must be non-negative");
  return add(lc, scale(la, T(mu)));
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (way < 2 || shot == 0 || queries == 0) throw ConfigError("episodes need way >= 2, shot >= 1, queries >= 1");
  if (!(contrast_t > 0.0)) throw ConfigError("contrastive temperature must be positive");
  if (!(mu >= 0.0)) throw ConfigError("mu must be non-negative");
  if (!(alpha >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (meta_batch == 0) throw ConfigError("meta-batch must hold at least one episode");
}

template <class T>
TrainLog meta_train(FicNet<T>& model, const ImageSplit& train, const TrainConfig& config, const ImageSplit* val,
                    std::ostream* log) {
  config.validate();
  if (train.num_classes() == 0) throw DataError("training split is empty");
  const bool use_aux = model.config().num_train_classes > 0;
  ParameterSet<T>& params = model.params();

  TrainLog result;
  double lr = config.alpha;
  double best_val = -1.0;
  for (std::size_t iter = 1; iter <= config.iterations; ++iter) {
    Rng rng(derive_seed(config.seed, iter));
    std::map<std::string, std::vector<T>> sum_grads;
    IterationRecord rec;
    rec.iter = iter;
    try {
      for (std::size_t e = 0; e < config.meta_batch; ++e) {
        const Episode ep = sample_episode(train, config.way, config.shot, config.queries, rng);
        const EpisodeOutput<T> out = model.forward(stack_images<T>(train, ep.support), ep.support_labels,
                                                   stack_images<T>(train, ep.query), config.way);
        const Tensor<T> lc = loss_contrastive(metric_scores(out, config.contrast_metric), ep.query_labels, config.contrast_t);
        Tensor<T> la = Tensor<T>::scalar(T(0));
        if (use_aux) {
          std::vector<std::size_t> global;
          for (const auto& r : ep.query) global.push_back(train.global_ids[r.cls]);
          la = loss_aux(out.query_fused, global, params);
        }
        const Tensor<T> loss = total_loss(lc, la, config.mu);
        rec.loss += double(loss.item()) / double(config.meta_batch);
        rec.lc += double(lc.item()) / double(config.meta_batch);
        rec.la += double(la.item()) / double(config.meta_batch);
        for (const auto& [name, grad] : backward(loss, params)) {
          auto& acc = sum_grads[name];
          if (acc.empty()) acc.assign(grad.size(), T(0));
          const auto& g = grad.values();
          for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
      }
      GradMap<T> grads;
      const T inv = T(1) / T(config.meta_batch);
      for (auto& [name, acc] : sum_grads) {
        for (auto& g : acc) g *= inv;
        grads.emplace(name, Tensor<T>(params.get(name).shape(), std::move(acc)));
      }
      params.sgd_step(grads, T(lr));
    } catch (const NumericError& err) {
      throw TrainingError("iter=" + std::to_string(iter) + ": non-finite value during training (" + err.what() + ")");
    }
    result.iterations.push_back(rec);
    if (log) {
      char line[160];
      std::snprintf(line, sizeof line, "iter=%zu loss=%.6f Lc=%.6f La=%.6f", iter, rec.loss, rec.lc, rec.la);
      *log << line << '\n';
    }

    if (val && config.val_every > 0 && iter % config.val_every == 0) {
      EvalConfig ec;
      ec.episodes = config.val_episodes;
      ec.way = config.way;
      ec.shot = config.shot;
      ec.queries = config.queries;
      ec.metric = config.metric;
      ec.seed = derive_seed(config.seed, 0x76616cull);
      const double acc = evaluate(model, *val, ec).mean_acc;
      result.validation.emplace_back(iter, acc);
      if (log) {
        char line[96];
        std::snprintf(line, sizeof line, "val iter=%zu acc=%.4f lr=%.6g", iter, acc, lr);
        *log << line << '\n';
      }
      if (config.halve_on_plateau && acc <= best_val) lr *= 0.5;
      best_val = std::max(best_val, acc);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport summarize(const std::vector<double>& per_episode_acc, Metric metric) {
  EvalReport r;
  r.metric = metric;
  r.episodes = per_episode_acc.size();
  r.per_episode_acc = per_episode_acc;
  if (r.episodes == 0) return r;
  const double n = double(r.episodes);
  double total = 0;
  for (double a : per_episode_acc) total += a;
  r.mean_acc = total / n;
  if (r.episodes > 1) {
    double ss = 0;
    for (double a : per_episode_acc) ss += (a - r.mean_acc) * (a - r.mean_acc);
    r.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return r;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  char buf[64];
  os << "episodes=" << episodes << '\n';
  std::snprintf(buf, sizeof buf, "%.8f", mean_acc);
  os << "mean_acc=" << buf << '\n';
  std::snprintf(buf, sizeof buf, "%.8f", ci95);
  os << "ci95=" << buf << '\n';
  os << "metric=" << metric_name(metric) << '\n';
  for (std::size_t i = 0; i < per_episode_acc.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.8f", per_episode_acc[i]);
    os << "ep " << i << ' ' << buf << '\n';
  }
  return os.str();
}

template <class T>
EvalReport evaluate(const FicNet<T>& model, const ImageSplit& split, const EvalConfig& config) {
  if (config.episodes == 0) throw ConfigError("evaluation needs at least one episode");
  if (config.way < 2) throw ConfigError("evaluation needs way >= 2");
  std::vector<double> acc(config.episodes, 0.0);
  std::exception_ptr failure;
  const int jobs = int(std::max<std::size_t>(config.jobs, 1));
#pragma omp parallel for num_threads(jobs) schedule(dynamic)
  for (std::ptrdiff_t e = 0; e < std::ptrdiff_t(config.episodes); ++e) {
    try {
      NoGradGuard no_grad;
      Rng rng(derive_seed(config.seed, std::uint64_t(e)));
      const Episode ep = sample_episode(split, config.way, config.shot, config.queries, rng);
      const EpisodeOutput<T> out = model.infer(stack_images<T>(split, ep.support), ep.support_labels,
                                               stack_images<T>(split, ep.query), config.way);
      const auto pred = predict(out, config.metric);
      std::size_t correct = 0;
      for (std::size_t j = 0; j < pred.size(); ++j) correct += pred[j] == ep.query_labels[j];
      acc[std::size_t(e)] = double(correct) / double(pred.size());
    } catch (...) {
#pragma omp critical(ficnet_eval_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  EvalReport report = summarize(acc, config.metric);
  std::ostringstream snapshot;
  snapshot << "way=" << config.way << " shot=" << config.shot << " queries=" << config.queries
           << " seed=" << config.seed;
  report.config = snapshot.str();
  return report;
}

// ---------------------------------------------------------------------------
// Frequency selection

template <class T>
FreqSelection select_frequency_indices(const ModelConfig& base, const ImageSplit& train, const ImageSplit& val,
                                       const FreqSelectConfig& config, std::ostream* log) {
  if (config.train.iterations == 0 || config.eval_episodes == 0) throw ConfigError("frequency selection budget is zero");
  if (config.grid_h > base.mfn.freq_h || config.grid_w > base.mfn.freq_w) {
    throw ConfigError("candidate grid " + std::to_string(config.grid_h) + "x" + std::to_string(config.grid_w) +
                      " exceeds the frequency space " + std::to_string(base.mfn.freq_h) + "x" +
                      std::to_string(base.mfn.freq_w));
  }
  if (config.m == 0 || config.m > config.grid_h * config.grid_w) {
    throw ConfigError("cannot keep " + std::to_string(config.m) + " of " +
                      std::to_string(config.grid_h * config.grid_w) + " candidates");
  }
  ModelConfig candidate = base;
  candidate.use_mfn = true;
  candidate.mfn.num_freq = 1;

  FreqSelection result;
  result.scores.assign(config.grid_h * config.grid_w, 0.0);
  for (std::size_t i = 0; i < config.grid_h; ++i) {
    for (std::size_t j = 0; j < config.grid_w; ++j) {
      FrequencyIndexSet single({{i, j, 0.0}}, base.mfn.freq_h, base.mfn.freq_w);
      FicNet<T> model(candidate, single, config.train.seed);
      meta_train(model, train, config.train);
      EvalConfig ec;
      ec.episodes = config.eval_episodes;
      ec.way = config.train.way;
      ec.shot = config.train.shot;
      ec.queries = config.train.queries;
      ec.metric = config.train.metric;
      ec.seed = derive_seed(config.train.seed, 0x66726571);
      const double acc = evaluate(model, val, ec).mean_acc;
      result.scores[i * config.grid_w + j] = acc;
      if (log) {
        char line[64];
        std::snprintf(line, sizeof line, "freq i=%zu j=%zu acc=%.4f", i, j, acc);
        *log << line << std::endl;
      }
    }
  }
  result.selected = FrequencyIndexSet::from_scores(result.scores, config.grid_h, config.grid_w, config.m);
  return result;
}

template class FicNet<float>;
template class FicNet<double>;

#define FICNET_INSTANTIATE_EPISODIC(T)                                                                        \
  template Classification classify(const std::vector<std::vector<T>>&, const std::vector<std::vector<T>>&,   \
                                   Metric);                                                                   \
  template std::vector<std::size_t> predict(const EpisodeOutput<T>&, Metric);                                \
  template Tensor<T> loss_aux(const Tensor<T>&, const std::vector<std::size_t>&, const ParameterSet<T>&);     \
  template Tensor<T> metric_scores(const EpisodeOutput<T>&, Metric);                                         \
  template Tensor<T> loss_contrastive(const Tensor<T>&, const std::vector<std::size_t>&, double);            \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, double);                                 \
  template TrainLog meta_train(FicNet<T>&, const ImageSplit&, const TrainConfig&, const ImageSplit*,         \
                               std::ostream*);                                                                \
  template EvalReport evaluate(const FicNet<T>&, const ImageSplit&, const EvalConfig&);                      \
  template FreqSelection select_frequency_indices<T>(const ModelConfig&, const ImageSplit&, const ImageSplit&, \
                                                     const FreqSelectConfig&, std::ostream*);

FICNET_INSTANTIATE_EPISODIC(float)
FICNET_INSTANTIATE_EPISODIC(double)

}  // namespace ficnet
