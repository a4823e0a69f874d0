#include "ficnet/gradcheck_suite.hpp"

#include <chrono>

#include "ficnet/dcm.hpp"
#include "ficnet/episodic.hpp"
#include "ficnet/mfn.hpp"
#include "ficnet/ops.hpp"

namespace ficnet {

namespace {

template <class T>
Tensor<T> randn(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = T(float(scale * rng.normal()));
  return Tensor<T>(std::move(shape), std::move(v));
}

// Values bounded away from zero, for divisors.
template <class T>
Tensor<T> away_from_zero(Shape shape, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = T(float((rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 1.5)));
  return Tensor<T>(std::move(shape), std::move(v));
}

// Distinct values spaced at least 0.05 apart, so max and relu kinks stay out of
// the difference stencil.
template <class T>
Tensor<T> spread(Shape shape, Rng& rng) {
  const std::size_t n = numel(shape);
  std::vector<std::size_t> perm = rng.choose(n, n);
  std::vector<T> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = T(float(0.05 * (double(perm[i]) - double(n / 2)) + 0.025));
  return Tensor<T>(std::move(shape), std::move(v));
}

// Random linear functional of y; keeps every output element in play.
template <class T>
Tensor<T> project(const Tensor<T>& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<T> w(y.size());
  for (auto& x : w) x = T(rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0));
  return sum(mul(y, Tensor<T>(y.shape(), std::move(w))));
}

template <class T>
Tensor<T> shifted(const Tensor<T>& t, double by) {
  std::vector<T> v = t.values();
  for (auto& x : v) x = T(float(double(x) + by));
  return Tensor<T>(t.shape(), std::move(v));
}

template <class T>
ParameterSet<T> as_params(const std::vector<std::string>& names, const std::vector<Tensor<T>>& values,
                          std::size_t offset = 0) {
  ParameterSet<T> ps;
  for (std::size_t i = 0; i < names.size(); ++i) ps.add(names[i], values[offset + i]);
  return ps;
}

template <class T>
struct Check {
  std::string name;
  std::function<std::pair<testkit::ScalarFn<T>, std::vector<Tensor<T>>>(Rng&)> build;
};

template <class T>
std::vector<Check<T>> checks() {
  using Inputs = std::vector<Tensor<T>>;
  using Fn = testkit::ScalarFn<T>;
  using Built = std::pair<Fn, Inputs>;
  std::vector<Check<T>> c;

  auto binary = [&](const char* name, Elementwise op, Shape b_shape) {
    c.push_back({name, [op, b_shape](Rng& rng) {
                   Tensor<T> b = op == Elementwise::kDiv ? away_from_zero<T>(b_shape, rng) : randn<T>(b_shape, rng);
                   return Built{[op](const Inputs& x) { return project(elementwise(op, x[0], x[1]), 11); },
                                {randn<T>({2, 3, 4}, rng), b}};
                 }});
  };
  binary("add", Elementwise::kAdd, {2, 3, 4});
  binary("sub_broadcast", Elementwise::kSub, {3, 1});
  binary("mul_broadcast", Elementwise::kMul, {1, 4});
  binary("div", Elementwise::kDiv, {2, 3, 4});
  binary("div_broadcast", Elementwise::kDiv, {4});

  c.push_back({"scale_add_scalar", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(add_scalar(scale(x[0], T(-1.7)), T(0.3)), 12); },
                              {randn<T>({3, 5}, rng)}};
               }});
  c.push_back({"matmul", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(matmul(x[0], x[1]), 13); },
                              {randn<T>({3, 4}, rng), randn<T>({4, 5}, rng)}};
               }});
  c.push_back({"matmul_batched", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(matmul(x[0], x[1]), 14); },
                              {randn<T>({2, 3, 4}, rng), randn<T>({2, 4, 2}, rng)}};
               }});
  c.push_back({"linear", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(linear(x[0], x[1], std::optional(x[2])), 15); },
                              {randn<T>({3, 4}, rng), randn<T>({5, 4}, rng), randn<T>({5}, rng)}};
               }});
  c.push_back({"conv2d", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(conv2d(x[0], x[1], std::optional(x[2]), 1, 1), 16); },
                              {randn<T>({2, 2, 5, 4}, rng), randn<T>({3, 2, 3, 3}, rng), randn<T>({3}, rng)}};
               }});
  c.push_back({"conv2d_stride2_nobias", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                return project(conv2d(x[0], x[1], std::optional<Tensor<T>>(), 2, 1), 17);
                              },
                              {randn<T>({1, 2, 5, 5}, rng), randn<T>({2, 2, 3, 3}, rng)}};
               }});
  c.push_back({"conv3d", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                return project(conv3d(x[0], x[1], std::optional(x[2]), {1, 1, 1}, {1, 1, 1}), 18);
                              },
                              {randn<T>({1, 2, 3, 4, 3}, rng), randn<T>({2, 2, 3, 3, 3}, rng), randn<T>({2}, rng)}};
               }});
  c.push_back({"conv3d_valid_133", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(conv3d(x[0], x[1], std::optional(x[2])), 19); },
                              {randn<T>({2, 3, 2, 4, 4}, rng), randn<T>({2, 3, 1, 3, 3}, rng), randn<T>({2}, rng)}};
               }});
  c.push_back({"max_pool2d", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(max_pool2d(x[0], 2, 2), 20); },
                              {spread<T>({2, 2, 4, 5}, rng)}};
               }});
  c.push_back({"relu", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(relu(x[0]), 21); }, {spread<T>({3, 7}, rng)}};
               }});
  c.push_back({"sigmoid", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(sigmoid(x[0]), 22); }, {randn<T>({3, 7}, rng)}};
               }});
  c.push_back({"softmax", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(softmax(x[0], 1), 23); },
                              {randn<T>({2, 5, 3}, rng)}};
               }});
  c.push_back({"batch_norm2d_train", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                BatchNormState<T> state(3);
                                return project(batch_norm2d(x[0], x[1], x[2], state, true), 24);
                              },
                              {randn<T>({2, 3, 3, 2}, rng), randn<T>({3}, rng), randn<T>({3}, rng)}};
               }});
  c.push_back({"batch_norm2d_eval", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                BatchNormState<T> state(3);
                                state.running_mean = {T(0.1), T(-0.2), T(0.3)};
                                state.running_var = {T(0.5), T(1.5), T(2.0)};
                                return project(batch_norm2d(x[0], x[1], x[2], state, false), 25);
                              },
                              {randn<T>({2, 3, 3, 2}, rng), randn<T>({3}, rng), randn<T>({3}, rng)}};
               }});
  c.push_back({"l2_normalize", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(l2_normalize(x[0], 1), 26); },
                              {randn<T>({2, 4, 3}, rng)}};
               }});
  c.push_back({"reshape_permute", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                return project(permute(reshape(x[0], {2, 3, 4}), {2, 0, 1}), 27);
                              },
                              {randn<T>({6, 4}, rng)}};
               }});
  c.push_back({"sum_mean", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                return add(project(sum(x[0], 1), 28), add(project(mean(x[0], 2), 29), mean(x[0])));
                              },
                              {randn<T>({2, 3, 4}, rng)}};
               }});
  c.push_back({"index_select_concat", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                return project(concat<T>({index_select(x[0], {2, 0, 2}), x[1]}), 30);
                              },
                              {randn<T>({3, 4}, rng), randn<T>({2, 4}, rng)}};
               }});
  c.push_back({"neighborhood_unfold", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(neighborhood_unfold(x[0], 3, 5), 31); },
                              {randn<T>({1, 2, 3, 4}, rng)}};
               }});
  c.push_back({"adaptive_avg_pool2d", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                return add(project(adaptive_avg_pool2d(x[0], 5, 5), 32),
                                           project(adaptive_avg_pool2d(x[0], 2, 3), 33));
                              },
                              {randn<T>({1, 2, 3, 4}, rng)}};
               }});
  c.push_back({"cross_entropy", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return cross_entropy(x[0], {1, 0, 3}); },
                              {randn<T>({3, 4}, rng)}};
               }});

  // mfn
  c.push_back({"mfn.weighted_neighborhood", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(weighted_neighborhood(x[0], 5, 5), 40); },
                              {randn<T>({1, 3, 3, 3}, rng)}};
               }});
  c.push_back({"mfn.dct_frequency_features", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                const DctBasis<T> basis(5, 5);
                                const auto freq = FrequencyIndexSet::low_first(3, 5, 5);
                                return project(dct_frequency_features(x[0], basis, freq), 41);
                              },
                              {randn<T>({2, 7, 5, 5}, rng)}};
               }});
  c.push_back({"mfn.multifreq_attention", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(multifreq_attention(x[0], x[1], x[2]), 42); },
                              {randn<T>({2, 4}, rng), randn<T>({4, 4}, rng), randn<T>({4}, rng)}};
               }});
  c.push_back({"mfn.reduce_neighborhood", [](Rng& rng) {
                 static const std::vector<std::string> names = {"mfn.reduce1.weight", "mfn.reduce1.bias",
                                                                "mfn.reduce2.weight", "mfn.reduce2.bias"};
                 return Built{[](const Inputs& x) {
                                return project(reduce_neighborhood(x[0], as_params<T>(names, x, 1)), 43);
                              },
                              {randn<T>({1, 4, 2, 2, 5, 5}, rng), randn<T>({2, 4, 1, 3, 3}, rng, 0.5),
                               shifted(randn<T>({2}, rng, 0.5), 1.0), randn<T>({4, 2, 1, 3, 3}, rng, 0.5),
                               shifted(randn<T>({4}, rng, 0.5), 1.0)}};
               }});
  c.push_back({"mfn.forward", [](Rng& rng) {
                 static const std::vector<std::string> names = {"mfn.fc.weight", "mfn.fc.bias", "mfn.reduce1.weight",
                                                                "mfn.reduce1.bias", "mfn.reduce2.weight",
                                                                "mfn.reduce2.bias"};
                 return Built{[](const Inputs& x) {
                                MfnConfig cfg;
                                cfg.num_freq = 2;
                                const Mfn<T> mfn(cfg, 4, FrequencyIndexSet::low_first(2, 5, 5));
                                const auto out = mfn.forward(FeatureMap<T>(x[0], Stage::kBasic), as_params<T>(names, x, 1));
                                return project(out.fused.tensor, 44);
                              },
                              {randn<T>({2, 4, 3, 3}, rng), randn<T>({4, 4}, rng), randn<T>({4}, rng),
                               randn<T>({2, 4, 1, 3, 3}, rng, 0.5), shifted(randn<T>({2}, rng, 0.5), 1.0),
                               randn<T>({4, 2, 1, 3, 3}, rng, 0.5), shifted(randn<T>({4}, rng, 0.5), 1.0)}};
               }});

  // dcm
  static const std::vector<std::string> cc_names = {"dcm.cc.query.weight", "dcm.cc.query.bias",
                                                    "dcm.cc.key.weight",   "dcm.cc.value.weight",
                                                    "dcm.cc.value.bias"};
  auto cc_inputs = [](Rng& rng, std::size_t ch, std::size_t qk) {
    // Moderate scale: products of unit-variance q and k make the softmax sharp
    // enough that a 1e-3 step leaves the quadratic regime.
    return Inputs{randn<T>({qk, ch, 1, 1}, rng, 0.5), randn<T>({qk}, rng, 0.5), randn<T>({qk, ch, 1, 1}, rng, 0.5),
                  randn<T>({ch, ch, 1, 1}, rng, 0.5), randn<T>({ch}, rng, 0.5)};
  };
  c.push_back({"dcm.criss_cross_aggregate", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(criss_cross_aggregate(x[0], x[1], x[2]), 50); },
                              {randn<T>({2, 2, 3, 4}, rng), randn<T>({2, 2, 3, 4}, rng), randn<T>({2, 3, 3, 4}, rng)}};
               }});
  c.push_back({"dcm.crisscross_step", [cc_inputs](Rng& rng) {
                 Inputs in{randn<T>({2, 8, 3, 3}, rng)};
                 for (auto& t : cc_inputs(rng, 8, 1)) in.push_back(t);
                 return Built{[](const Inputs& x) {
                                return project(crisscross_step(x[0], as_params<T>(cc_names, x, 1)), 51);
                              },
                              in};
               }});
  c.push_back({"dcm.bcc_two_loops", [cc_inputs](Rng& rng) {
                 Inputs in{randn<T>({1, 8, 3, 2}, rng), randn<T>({1, 8, 3, 2}, rng)};
                 for (auto& t : cc_inputs(rng, 8, 1)) in.push_back(t);
                 return Built{[](const Inputs& x) {
                                return project(bcc(x[0], x[1], as_params<T>(cc_names, x, 2), 2), 52);
                              },
                              in};
               }});
  c.push_back({"dcm.class_prototypes", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(class_prototypes(x[0], {1, 0, 1, 2}, 3), 53); },
                              {randn<T>({4, 2, 2, 2}, rng)}};
               }});
  c.push_back({"dcm.correlation_pairs", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(correlation_pairs(x[0], x[1]), 54); },
                              {randn<T>({2, 3, 2, 2}, rng), randn<T>({3, 3, 2, 2}, rng)}};
               }});
  c.push_back({"dcm.correlation_4d_transpose", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                return project(transpose_positions(correlation_4d(x[0], x[1])), 55);
                              },
                              {randn<T>({2, 3, 2, 2}, rng), randn<T>({2, 3, 2, 2}, rng)}};
               }});
  c.push_back({"dcm.dca_refine", [](Rng& rng) {
                 static const std::vector<std::string> names = {"dcm.dca.conv1.weight", "dcm.dca.conv1.bias",
                                                                "dcm.dca.conv_a.weight", "dcm.dca.conv_b.weight"};
                 Inputs in{randn<T>({2, 4, 4}, rng), randn<T>({1, 1, 3, 3, 3}, rng, 0.5), randn<T>({1}, rng, 0.5),
                           randn<T>({1, 1, 3, 3, 3}, rng, 0.5), randn<T>({1, 1, 3, 3, 3}, rng, 0.5)};
                 return Built{[](const Inputs& x) {
                                return project(dca_refine(x[0], 2, 2, as_params<T>(names, x, 1)), 56);
                              },
                              in};
               }});
  for (Side side : {Side::kSupport, Side::kQuery}) {
    c.push_back({side == Side::kSupport ? "dcm.attention_support" : "dcm.attention_query", [side](Rng& rng) {
                   return Built{[side](const Inputs& x) {
                                  return project(attention_from_correlation(x[0], side, 2.0), 57);
                                },
                                {randn<T>({2, 4, 4}, rng)}};
                 }});
  }
  c.push_back({"dcm.modulate", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return project(modulate(x[0], x[1]), 58); },
                              {randn<T>({2, 3, 2, 2}, rng), randn<T>({2, 4}, rng)}};
               }});

  // losses
  c.push_back({"loss_contrastive", [](Rng& rng) {
                 return Built{[](const Inputs& x) { return loss_contrastive(x[0], {0, 2, 1}, 0.2); },
                              {randn<T>({3, 4}, rng, 0.3)}};
               }});
  c.push_back({"loss_aux", [](Rng& rng) {
                 return Built{[](const Inputs& x) {
                                ParameterSet<T> ps;
                                ps.add("aux.fc.weight", x[1]);
                                ps.add("aux.fc.bias", x[2]);
                                return loss_aux(x[0], {4, 0, 2}, ps);
                              },
                              {randn<T>({3, 4, 2, 2}, rng), randn<T>({5, 4}, rng), randn<T>({5}, rng)}};
               }});
  return c;
}

// Whole training loss of a small model: backbone in training mode, MFN, BCC,
// DCA, cosine scores, Lc + mu La. Inputs are every parameter.
template <class T>
std::pair<testkit::ScalarFn<T>, std::vector<Tensor<T>>> pipeline_check(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.backbone.block_channels = 8;
  cfg.backbone.num_blocks = 2;
  cfg.backbone.input_side = 8;
  cfg.mfn.num_freq = 2;
  cfg.dcm.qk_ratio = 8;
  cfg.num_train_classes = 3;
  auto model = std::make_shared<FicNet<T>>(cfg, FrequencyIndexSet::low_first(2, 5, 5), seed);
  Rng rng(derive_seed(seed, 99));
  // Jitter every parameter off its initial value. The beta and bias shifts
  // keep ReLU inputs clear of zero by more than the difference step.
  auto draw = [&](const std::string& name, double init) {
    double shift = 0.0;
    if (name.ends_with("bn.beta")) shift = 2.0;
    if (name.ends_with("reduce1.bias") || name.ends_with("reduce2.bias")) shift = 1.0;
    return init + shift + 0.3 * rng.normal();
  };
  std::vector<Tensor<T>> inputs;
  std::vector<std::string> names;
  for (const auto& p : model->params().items()) {
    names.push_back(p.name);
    std::vector<T> v = p.value.values();
    for (auto& x : v) x = T(float(draw(p.name, double(x))));
    inputs.emplace_back(p.value.shape(), std::move(v));
  }
  const Tensor<T> support = randn<T>({2, 3, cfg.backbone.input_side, cfg.backbone.input_side}, rng);
  const Tensor<T> query = randn<T>({2, 3, cfg.backbone.input_side, cfg.backbone.input_side}, rng);
  const std::vector<std::size_t> support_labels{0, 1}, query_labels{1, 0}, global{2, 0};

  testkit::ScalarFn<T> fn = [model, names, support, query, support_labels, query_labels,
                             global](const std::vector<Tensor<T>>& x) {
    for (std::size_t i = 0; i < names.size(); ++i) model->params().assign(names[i], x[i]);
    const auto out = model->forward(support, support_labels, query, 2);
    const Tensor<T> lc = loss_contrastive(out.scores, query_labels, 0.2);
    const Tensor<T> la = loss_aux(out.query_fused, global, model->params());
    return total_loss(lc, la, 0.7);
  };
  return {fn, inputs};
}

}  // namespace

std::vector<std::string> gradcheck_suite_names() {
  std::vector<std::string> names;
  for (const auto& c : checks<double>()) names.push_back(c.name);
  names.push_back("pipeline.total_loss");
  return names;
}

template <class T>
std::vector<OpCheck> run_gradcheck_suite(const GradcheckSuiteOptions& options,
                                         const std::function<void(const OpCheck&)>& on_result) {
  std::vector<OpCheck> results;
  // Inputs are drawn on the 32-bit grid, so both precisions see identical values.
  auto run = [&](const std::string& name, const testkit::ScalarFn<T>& fn, const testkit::ScalarFn<double>& ref,
                 const std::vector<Tensor<double>>& inputs) {
    const auto t0 = std::chrono::steady_clock::now();
    OpCheck r;
    r.name = name;
    r.tolerance = testkit::tolerance<T>();
    r.result = testkit::gradcheck_against<T>(fn, ref, inputs, testkit::default_step<T>());
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_result) on_result(r);
    results.push_back(std::move(r));
  };
  const auto narrow = checks<T>();
  const auto wide = checks<double>();
  for (std::size_t k = 0; k < narrow.size(); ++k) {
    if (!options.filter.empty() && narrow[k].name.find(options.filter) == std::string::npos) continue;
    Rng rng_narrow(derive_seed(options.seed, k + 1)), rng_wide(derive_seed(options.seed, k + 1));
    auto [fn, unused] = narrow[k].build(rng_narrow);
    auto [ref, inputs] = wide[k].build(rng_wide);
    run(narrow[k].name, fn, ref, inputs);
  }
  const std::string pipeline = "pipeline.total_loss";
  if (options.include_pipeline && (options.filter.empty() || pipeline.find(options.filter) != std::string::npos)) {
    auto [fn, unused] = pipeline_check<T>(options.seed);
    auto [ref, inputs] = pipeline_check<double>(options.seed);
    run(pipeline, fn, ref, inputs);
  }
  return results;
}

template std::vector<OpCheck> run_gradcheck_suite<float>(const GradcheckSuiteOptions&,
                                                         const std::function<void(const OpCheck&)>&);
template std::vector<OpCheck> run_gradcheck_suite<double>(const GradcheckSuiteOptions&,
                                                          const std::function<void(const OpCheck&)>&);

}  // namespace ficnet
