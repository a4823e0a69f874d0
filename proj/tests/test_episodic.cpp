#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ficnet/episodic.hpp"
#include "ficnet/testkit.hpp"
#include "support.hpp"

using namespace ficnet;
using test::make;

namespace {

// Classes whose images are independent noise: nothing to learn.
ImageSplit noise_split(std::size_t classes, std::size_t per_class, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  ImageSplit split;
  split.side = side;
  for (std::size_t c = 0; c < classes; ++c) {
    split.add_class("noise" + std::to_string(c), c);
    for (std::size_t s = 0; s < per_class; ++s) {
      std::vector<float> img(3 * side * side);
      for (auto& v : img) v = float(rng.uniform());
      split.images.back().push_back(std::move(img));
    }
  }
  return split;
}

ModelConfig small_model(std::size_t channels, std::size_t train_classes) {
  ModelConfig m;
  m.backbone.block_channels = channels;
  m.mfn.num_freq = 4;
  m.num_train_classes = train_classes;
  return m;
}

ModelConfig ablated(std::size_t channels) {
  ModelConfig m = small_model(channels, 0);
  m.use_mfn = false;
  m.dcm.use_bcc = false;
  m.dcm.use_dca = false;
  return m;
}

const SynthSpec& spec() {
  static const SynthSpec s = [] {
    SynthSpec x;
    x.num_classes = 12;
    x.samples_per_class = 8;
    x.seed = 21;
    return x;
  }();
  return s;
}

template <class T>
Tensor<T> episode_loss(FicNet<T>& model, const ImageSplit& split, const Episode& ep, const TrainConfig& tc) {
  const auto out = model.forward(stack_images<T>(split, ep.support), ep.support_labels, stack_images<T>(split, ep.query),
                                 ep.way);
  const auto lc = loss_contrastive(metric_scores(out, tc.contrast_metric), ep.query_labels, tc.contrast_t);
  std::vector<std::size_t> global;
  for (const auto& r : ep.query) global.push_back(split.global_ids[r.cls]);
  return total_loss(lc, loss_aux(out.query_fused, global, model.params()), tc.mu);
}

std::vector<std::vector<double>> rows(const Tensor<double>& x) {
  const std::size_t n = x.dim(0), r = x.size() / n;
  std::vector<std::vector<double>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(x.values().begin() + std::ptrdiff_t(i * r), x.values().begin() + std::ptrdiff_t((i + 1) * r));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Episodes

TEST_CASE("episode structure") {
  const auto split = noise_split(6, 7, 4, 1);
  Rng rng(3);
  const auto ep = sample_episode(split, 6, 2, 3, rng);
  CHECK(std::set<std::size_t>(ep.classes.begin(), ep.classes.end()).size() == 6);
  CHECK(ep.support.size() == 12);
  CHECK(ep.query.size() == 18);
  for (std::size_t label = 0; label < 6; ++label) {
    std::set<std::size_t> seen;
    for (std::size_t k = 0; k < 2; ++k) {
      CHECK(ep.support_labels[label * 2 + k] == label);
      CHECK(ep.support[label * 2 + k].cls == ep.classes[label]);
      seen.insert(ep.support[label * 2 + k].sample);
    }
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(ep.query_labels[label * 3 + k] == label);
      CHECK(ep.query[label * 3 + k].cls == ep.classes[label]);
      seen.insert(ep.query[label * 3 + k].sample);
    }
    CHECK(seen.size() == 5);  // support and query never share an image
  }
  Rng a(9), b(9);
  const auto e1 = sample_episode(split, 4, 1, 2, a);
  const auto e2 = sample_episode(split, 4, 1, 2, b);
  CHECK(e1.classes == e2.classes);
  CHECK(e1.query_labels == e2.query_labels);
  for (std::size_t i = 0; i < e1.query.size(); ++i) CHECK(e1.query[i].sample == e2.query[i].sample);

  CHECK_THROWS_AS(sample_episode(split, 7, 1, 1, rng), DataError);
  CHECK_THROWS_AS(sample_episode(split, 2, 4, 4, rng), DataError);
}

TEST_CASE("class selection is uniform") {
  const auto split = noise_split(20, 2, 1, 2);
  std::vector<std::size_t> hits(20, 0);
  Rng rng(4);
  const std::size_t draws = 10000;
  for (std::size_t d = 0; d < draws; ++d) {
    for (std::size_t c : sample_episode(split, 5, 1, 1, rng).classes) ++hits[c];
  }
  const double p = 0.25, sigma = std::sqrt(p * (1 - p) / double(draws));
  for (std::size_t h : hits) CHECK(std::abs(double(h) / double(draws) - p) <= 3 * sigma);
}

// ---------------------------------------------------------------------------
// Classification

TEST_CASE("classify examples") {
  const std::vector<std::vector<double>> s{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const std::vector<std::vector<double>> q{{0, 1, 0}, {0, 2, 0}, {0, 1, 0}};
  CHECK(classify(s, q, Metric::kCosine).prediction == 1);
  const std::vector<std::vector<double>> same{{1, 1}, {1, 1}, {1, 1}};
  for (Metric m : {Metric::kCosine, Metric::kEuclidean, Metric::kManhattan}) CHECK(classify(same, same, m).prediction == 0);
  CHECK(classify<double>({{0, 0}}, {{1, 0}}, Metric::kCosine).scores[0] == 0.0);
  CHECK(classify<double>({{1, 2}}, {{4, 6}}, Metric::kEuclidean).scores[0] == -5.0);
  CHECK(classify<double>({{1, 2}}, {{4, 6}}, Metric::kManhattan).scores[0] == -7.0);
}

TEST_CASE("cosine and euclidean rank unit vectors alike") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t n = test::extent(rng, 2, 8), c = test::extent(rng, 2, 10);
    std::vector<std::vector<double>> s(n), q(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = test::randn(rng, c);
      q[i] = test::randn(rng, c);
      for (auto* v : {&s[i], &q[i]}) {
        double norm = 0;
        for (double x : *v) norm += x * x;
        for (double& x : *v) x /= std::sqrt(norm);
      }
    }
    CHECK(classify(s, q, Metric::kCosine).prediction == classify(s, q, Metric::kEuclidean).prediction);
  }
}

// ---------------------------------------------------------------------------
// Losses

TEST_CASE("contrastive loss closed forms") {
  const auto scores = make<double>({1, 5}, {1, 0, 0, 0, 0});
  const double lc = loss_contrastive(scores, {0}, 0.2).item();
  CHECK(std::abs(lc - std::log1p(4 * std::exp(-5.0))) <= 1e-12);
  CHECK(lc == doctest::Approx(0.02695).epsilon(1e-3));
  CHECK(loss_contrastive(Tensor<double>::full({2, 5}, 0.3), {1, 4}, 0.2).item() == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  CHECK_THROWS_AS(loss_contrastive(scores, {0}, 0.0), ConfigError);

  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const std::size_t n = test::extent(rng, 2, 8), y = rng.below(n);
    auto s = test::uniform(rng, n, -1, 1);
    s[y] = *std::max_element(s.begin(), s.end()) + rng.uniform(0.01, 0.5);  // positive margin
    const auto t = make<double>({1, n}, s);
    double prev = INFINITY;
    for (double temp : {2.0, 1.0, 0.5, 0.2, 0.1, 0.05}) {
      const double l = loss_contrastive(t, {y}, temp).item();
      CHECK(l == doctest::Approx(testkit::softmax_ce_reference(s, y, temp)).epsilon(1e-12));
      CHECK(l < prev);
      prev = l;
    }
  }
}

TEST_CASE("contrastive loss is the cross entropy of scores / t") {
  Rng rng(5);
  const auto scores = test::random_tensor<double>(rng, {4, 5});
  const std::vector<std::size_t> y{0, 3, 2, 2};
  CHECK(loss_contrastive(scores, y, 0.2).item() == cross_entropy(scale(scores, 1.0 / 0.2), y).item());
}

TEST_CASE("auxiliary loss") {
  ParameterSet<double> p;
  p.add("aux.fc.weight", Tensor<double>::zeros({7, 3}));
  p.add("aux.fc.bias", Tensor<double>::zeros({7}));
  Rng rng(6);
  const auto f = test::random_tensor<double>(rng, {2, 3, 2, 2});
  CHECK(loss_aux(f, {1, 6}, p).item() == doctest::Approx(std::log(7.0)).epsilon(1e-14));
  CHECK_THROWS_AS(loss_aux(f, {7, 0}, p), ConfigError);

  // Growing margin on the true class drives the loss to zero.
  const auto ones = Tensor<double>::full({1, 3, 2, 2}, 1.0);
  double prev = INFINITY;
  for (double margin : {1.0, 10.0, 40.0}) {
    std::vector<double> b(7, 0.0);
    b[2] = margin;
    p.assign("aux.fc.bias", make<double>({7}, b));
    const double l = loss_aux(ones, {2}, p).item();
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-15);
}

TEST_CASE("total loss") {
  const auto lc = Tensor<double>::scalar(1.0).requiring_grad();
  const auto la = Tensor<double>::scalar(2.0).requiring_grad();
  CHECK(total_loss(lc, la, 0.0).item() == 1.0);
  CHECK(total_loss(lc, la, 0.7).item() == doctest::Approx(2.4).epsilon(1e-15));
  const auto g = gradients<double>(total_loss(lc, la, 0.7), std::vector{lc, la});
  CHECK(g[0].item() == 1.0);
  CHECK(g[1].item() == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("metric scores") {
  Rng rng(7);
  const FicNet<double> model(small_model(8, 0), FrequencyIndexSet::low_first(4, 5, 5), 1);
  const auto basic = test::random_tensor<double>(rng, {7, 8, 2, 2});
  const auto out = model.head(basic, {0, 1, 2, 0}, 3);  // 3 queries
  REQUIRE(out.scores.shape() == Shape{3, 3});
  const auto eu = metric_scores(out, Metric::kEuclidean);
  const auto mh = metric_scores(out, Metric::kManhattan);
  const auto s = rows(out.pairs.support), q = rows(out.pairs.query);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < 3; ++i) {
      double d2 = 0, d1 = 0;
      for (std::size_t c = 0; c < 8; ++c) {
        const double d = s[i * 3 + j][c] - q[i * 3 + j][c];
        d2 += d * d;
        d1 += std::abs(d);
      }
      CHECK(eu[j * 3 + i] == doctest::Approx(-d2).epsilon(1e-12));
      CHECK(mh[j * 3 + i] == doctest::Approx(-d1).epsilon(1e-12));
    }
  CHECK(test::bit_equal(metric_scores(out, Metric::kCosine), out.scores));
}

// ---------------------------------------------------------------------------
// Pipeline properties

TEST_CASE("the ablated pipeline is a mean-pooled prototype classifier") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t c = 8, way = test::extent(rng, 2, 5), shot = test::extent(rng, 1, 3), nq = test::extent(rng, 1, 6);
    const FicNet<double> model(ablated(c), FrequencyIndexSet::low_first(4, 5, 5), seed);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < way; ++i)
      for (std::size_t k = 0; k < shot; ++k) labels.push_back(i);
    const auto basic = test::random_tensor<double>(rng, {way * shot + nq, c, 2, 2});
    const auto out = model.head(basic, labels, way);
    const auto all = rows(basic);
    const std::vector<std::vector<double>> support(all.begin(), all.begin() + std::ptrdiff_t(way * shot));
    const std::vector<std::vector<double>> queries(all.begin() + std::ptrdiff_t(way * shot), all.end());
    CHECK(predict(out, Metric::kCosine) == testkit::protonet_reference(support, labels, queries, way, c, testkit::RefMetric::kCosine));
    CHECK(predict(out, Metric::kEuclidean) == testkit::protonet_reference(support, labels, queries, way, c, testkit::RefMetric::kEuclidean));
    CHECK(predict(out, Metric::kManhattan) == testkit::protonet_reference(support, labels, queries, way, c, testkit::RefMetric::kManhattan));
  }
}

TEST_CASE("scaling every modulated vector keeps the cosine predictions") {
  Rng rng(8);
  const FicNet<double> model(small_model(8, 0), FrequencyIndexSet::low_first(4, 5, 5), 2);
  auto out = model.head(test::random_tensor<double>(rng, {10, 8, 2, 2}), {0, 1, 2, 3, 4}, 5);
  const auto base = predict(out, Metric::kCosine);
  for (double lambda : {0.1, 10.0}) {
    auto scaled = out;
    scaled.pairs.support = scale(out.pairs.support, lambda);
    scaled.pairs.query = scale(out.pairs.query, lambda);
    CHECK(predict(scaled, Metric::kCosine) == base);
  }
}

// ---------------------------------------------------------------------------
// Training

TEST_CASE("alpha = 0 leaves every parameter bit-identical") {
  const auto train = test::synthetic_split(spec(), 0, 6);
  FicNet<float> model(small_model(8, 6), FrequencyIndexSet::low_first(4, 5, 5), 3);
  const auto before = model.params();
  TrainConfig tc;
  tc.alpha = 0.0;
  tc.iterations = 3;
  tc.meta_batch = 2;
  tc.way = 3;
  tc.shot = 2;
  tc.queries = 2;
  meta_train(model, train, tc);
  CHECK(test::same_params(before, model.params()));
}

TEST_CASE("same seed, same log") {
  const auto train = test::synthetic_split(spec(), 0, 6);
  const auto val = test::synthetic_split(spec(), 6, 3);
  TrainConfig tc;
  tc.iterations = 4;
  tc.meta_batch = 1;
  tc.way = 3;
  tc.shot = 1;
  tc.queries = 2;
  tc.val_every = 2;
  tc.val_episodes = 3;
  tc.seed = 17;
  std::ostringstream la, lb;
  FicNet<float> a(small_model(8, 6), FrequencyIndexSet::low_first(4, 5, 5), 5);
  FicNet<float> b(small_model(8, 6), FrequencyIndexSet::low_first(4, 5, 5), 5);
  meta_train(a, train, tc, &val, &la);
  meta_train(b, train, tc, &val, &lb);
  CHECK(la.str() == lb.str());
  CHECK(test::same_params(a.params(), b.params()));
  CHECK(la.str().rfind("iter=1 loss=", 0) == 0);
  CHECK(la.str().find("val iter=2 acc=") != std::string::npos);
}

TEST_CASE("one small SGD step lowers the loss on its own batch") {
  const auto train = test::synthetic_split(spec(), 0, 6);
  TrainConfig tc;
  tc.way = 3;
  tc.shot = 2;
  tc.queries = 2;
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    FicNet<double> model(small_model(8, 6), FrequencyIndexSet::low_first(4, 5, 5), seed);
    Rng rng(derive_seed(seed, 99));
    const Episode ep = sample_episode(train, tc.way, tc.shot, tc.queries, rng);
    const auto loss = episode_loss(model, train, ep, tc);
    model.params().sgd_step(backward(loss, model.params()), 1e-3);
    const double after = episode_loss(model, train, ep, tc).item();
    decreased += after < loss.item();
  }
  CHECK(decreased >= 9);
}

TEST_CASE("training rejects bad configurations") {
  const auto train = test::synthetic_split(spec(), 0, 3);
  FicNet<float> model(small_model(8, 3), FrequencyIndexSet::low_first(4, 5, 5), 3);
  TrainConfig tc;
  tc.iterations = 1;
  tc.way = 5;
  CHECK_THROWS_AS(meta_train(model, train, tc), DataError);
  tc.way = 1;
  CHECK_THROWS_AS(meta_train(model, train, tc), ConfigError);
  tc.way = 2;
  tc.alpha = -1;
  CHECK_THROWS_AS(meta_train(model, train, tc), ConfigError);
  tc.alpha = 1e30;
  tc.shot = 1;
  tc.queries = 1;
  tc.iterations = 3;
  CHECK_THROWS_AS(meta_train(model, train, tc), TrainingError);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST_CASE("summary statistics") {
  const auto r = summarize({0.8, 1.0, 0.6}, Metric::kCosine);
  const auto [mean, half] = testkit::mean_ci95_reference({0.8, 1.0, 0.6});
  CHECK(std::abs(r.mean_acc - 0.8) <= 1e-12);
  CHECK(std::abs(r.ci95 - 1.96 * 0.2 / std::sqrt(3.0)) <= 1e-9);
  CHECK(r.mean_acc == doctest::Approx(mean).epsilon(1e-15));
  CHECK(r.ci95 == doctest::Approx(half).epsilon(1e-15));
  CHECK(summarize({0.4, 0.4, 0.4, 0.4}, Metric::kCosine).ci95 == 0.0);
  CHECK(summarize({0.4}, Metric::kCosine).ci95 == 0.0);
}

TEST_CASE("report text") {
  const auto r = summarize({0.5, 1.0}, Metric::kManhattan);
  CHECK(r.to_text() ==
        "episodes=2\nmean_acc=0.75000000\nci95=0.49000000\nmetric=manhattan\nep 0 0.50000000\nep 1 1.00000000\n");
}

TEST_CASE("untrained model on structureless data is at chance") {
  const auto split = noise_split(8, 6, 32, 11);
  const FicNet<float> model(small_model(8, 0), FrequencyIndexSet::low_first(4, 5, 5), 4);
  EvalConfig ec;
  ec.episodes = 150;
  ec.way = 5;
  ec.shot = 1;
  ec.queries = 2;
  ec.seed = 3;
  const auto r = evaluate(model, split, ec);
  const double p = 0.2, n = double(ec.episodes * ec.way * ec.queries);
  CHECK(std::abs(r.mean_acc - p) <= 3 * std::sqrt(p * (1 - p) / n));
}

TEST_CASE("evaluation does not depend on the number of jobs") {
  const auto split = test::synthetic_split(spec(), 0, 6);
  const FicNet<float> model(small_model(8, 0), FrequencyIndexSet::low_first(4, 5, 5), 4);
  EvalConfig ec;
  ec.episodes = 12;
  ec.way = 3;
  ec.shot = 2;
  ec.queries = 2;
  ec.seed = 8;
  const auto one = evaluate(model, split, ec);
  ec.jobs = 4;
  const auto four = evaluate(model, split, ec);
  CHECK(one.to_text() == four.to_text());
  CHECK(one.per_episode_acc == four.per_episode_acc);
  ec.episodes = 0;
  CHECK_THROWS_AS(evaluate(model, split, ec), ConfigError);
}
