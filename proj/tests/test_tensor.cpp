#include <cmath>
#include <numeric>

#include "doctest.h"
#include "ficnet/gradcheck_suite.hpp"
#include "ficnet/ops.hpp"
#include "ficnet/parameter.hpp"
#include "ficnet/testkit.hpp"
#include "support.hpp"

using namespace ficnet;
using test::make;

namespace {

template <class T>
Tensor<T> leaf(const Shape& shape, const std::vector<double>& v) {
  return make<T>(shape, v).requiring_grad();
}

// Fixed random projection of an op output down to a scalar, so every output
// element gets a distinct weight in the gradient.
template <class T>
Tensor<T> project(const Tensor<T>& out, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(out.size());
  for (auto& x : w) x = double(float((rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.5, 1.5)));
  return sum(mul(out, make<T>(out.shape(), w)));
}

// Distinct values with gaps of 0.05, none within 0.025 of zero: finite
// differences never cross a ReLU or max-pool decision.
std::vector<double> spread(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  const auto order = rng.choose(n, n);
  for (std::size_t i = 0; i < n; ++i) v[i] = double(float(0.05 * (double(order[i]) - double(n) / 2) + 0.025));
  return v;
}

std::vector<double> away_from_zero(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = double(float((rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.5, 1.5)));
  return v;
}

struct Case {
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> values;

  void add(Shape s, std::vector<double> v) {
    shapes.push_back(std::move(s));
    values.push_back(std::move(v));
  }
  void add(Rng& rng, Shape s, double scale = 1.0) {
    const std::size_t n = numel(s);
    add(std::move(s), test::randn(rng, n, scale));
  }
};

// Checks `fn` in 64-bit against its own differences and in 32-bit against the
// 64-bit evaluation, at the default steps and tolerances. The 64-bit result is
// the gate. A 32-bit miss only warns: on a gradient element that is a near-
// cancelling sum of O(1) terms, single-precision accumulation alone moves the
// relative error past 1e-3 (seen for conv2d at seed 18, |g| ~ 1.5e-5).
template <class F>
void check_both(const char* what, const F& fn, const Case& c) {
  std::vector<Tensor<double>> inputs;
  for (std::size_t i = 0; i < c.shapes.size(); ++i) inputs.push_back(make<double>(c.shapes[i], c.values[i]));
  const testkit::ScalarFn<double> fd = fn;
  const testkit::ScalarFn<float> ff = fn;
  const auto r64 = testkit::gradcheck<double>(fd, inputs, testkit::default_step<double>());
  const auto r32 = testkit::gradcheck_against<float>(ff, fd, inputs, testkit::default_step<float>());
  INFO(std::string(what) << " 64-bit worst " << r64.worst << " (a=" << r64.analytic << " n=" << r64.numeric << ")");
  INFO(std::string(what) << " 32-bit worst " << r32.worst << " (a=" << r32.analytic << " n=" << r32.numeric << ")");
  CHECK(r64.worst <= testkit::tolerance<double>());
  WARN(r32.worst <= testkit::tolerance<float>());
}

#define SCALAR_FN(body)                                                \
  [=](const auto& in) {                                                \
    using T [[maybe_unused]] = typename std::decay_t<decltype(in)>::value_type::value_type; \
    body                                                               \
  }

const std::optional<Tensor<double>> kNoBias;

}  // namespace

// ---------------------------------------------------------------------------
// Forward examples

TEST_CASE("elementwise examples") {
  const auto a = make<double>({2}, {1, 2});
  const auto b = make<double>({2}, {3, 4});
  CHECK(add(a, b).values() == std::vector<double>{4, 6});
  Rng rng(3);
  const auto x = test::random_tensor<float>(rng, {3, 4});
  CHECK(test::bit_equal(mul(x, Tensor<float>::full({3, 4}, 1.0f)), x));
  CHECK(sub(a, b).values() == std::vector<double>{-2, -2});
  CHECK(div(b, a).values() == std::vector<double>{3, 2});
  CHECK_THROWS_AS(div(a, make<double>({2}, {1, 0})), NumericError);
  CHECK_THROWS_AS(add(a, make<double>({3}, {1, 2, 3})), ShapeError);
}

TEST_CASE("gradient of mul at a=2, b=5 is 5") {
  const auto a = leaf<double>({1}, {2});
  const auto b = make<double>({1}, {5});
  const auto g = gradients<double>(sum(mul(a, b)), std::vector{a});
  CHECK(g[0].item() == 5.0);
}

TEST_CASE("broadcast equals the materialized operand") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Shape s = test::random_shape(rng, 1 + rng.below(4), 1, 4);
    Shape bs = s;
    // Keep a right-aligned suffix, collapsing some extents to 1.
    bs.erase(bs.begin(), bs.begin() + std::ptrdiff_t(rng.below(s.size())));
    for (auto& d : bs)
      if (rng.below(2)) d = 1;
    const auto a = test::random_tensor<double>(rng, s);
    const auto b = make<double>(bs, away_from_zero(rng, numel(bs)));
    std::vector<double> full(numel(s));
    for (std::size_t i = 0; i < full.size(); ++i) {
      std::size_t rem = i, bi = 0, stride = 1;
      for (std::size_t ax = s.size(); ax-- > 0;) {
        const std::size_t coord = rem % s[ax];
        rem /= s[ax];
        const std::size_t bax = ax + bs.size();
        if (bax < s.size()) continue;
        const std::size_t bd = bs[bax - s.size()];
        bi += (bd == 1 ? 0 : coord) * stride;
        stride *= bd;
      }
      full[i] = b[bi];
    }
    const auto m = make<double>(s, full);
    for (auto op : {Elementwise::kAdd, Elementwise::kSub, Elementwise::kMul, Elementwise::kDiv}) {
      CHECK(test::bit_equal(elementwise(op, a, b), elementwise(op, a, m)));
    }
  }
}

TEST_CASE("matmul examples") {
  const auto x = make<double>({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(test::bit_equal(matmul(make<double>({2, 2}, {1, 0, 0, 1}), x), x));
  CHECK(matmul(make<double>({2, 2}, {1, 2, 3, 4}), make<double>({2, 1}, {1, 1})).values() ==
        std::vector<double>{3, 7});
  CHECK_THROWS_AS(matmul(x, x), ShapeError);
}

TEST_CASE("conv2d examples") {
  Rng rng(5);
  const auto x = test::random_tensor<double>(rng, {1, 4, 5});
  CHECK(test::bit_equal(conv2d(x, Tensor<double>::full({1, 1, 1, 1}, 1.0), kNoBias), x));
  const auto ones = Tensor<double>::full({1, 3, 3}, 1.0);
  const auto y = conv2d(ones, Tensor<double>::full({1, 1, 3, 3}, 1.0), kNoBias, 1, 1);
  CHECK(y.shape() == Shape{1, 3, 3});
  CHECK(y[4] == 9.0);
  CHECK(y[0] == 4.0);
  CHECK_THROWS_AS(conv2d(ones, Tensor<double>::full({1, 1, 2, 2}, 1.0), kNoBias), ShapeError);
}

TEST_CASE("conv3d examples") {
  Rng rng(6);
  const auto x = test::random_tensor<double>(rng, {1, 2, 3, 4});
  CHECK(test::bit_equal(conv3d(x, Tensor<double>::full({1, 1, 1, 1, 1}, 1.0), kNoBias), x));
  const auto y = conv3d(Tensor<double>::full({1, 3, 3, 3}, 1.0), Tensor<double>::full({1, 1, 3, 3, 3}, 1.0),
                        kNoBias);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 27.0);
}

TEST_CASE("activation and pooling examples") {
  const auto s = softmax(Tensor<double>::zeros({3}), 0);
  for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(sigmoid(Tensor<double>::zeros({1})).item() == 0.5);
  CHECK(relu(make<double>({3}, {-1, 0, 2})).values() == std::vector<double>{0, 0, 2});
  const auto p = max_pool2d(make<double>({1, 2, 4}, {1, 5, 2, 3, 4, 0, 8, 1}));
  CHECK(p.values() == std::vector<double>{5, 8});
}

TEST_CASE("max_pool2d gradient goes to the first maximum") {
  const auto x = leaf<double>({1, 2, 2}, {3, 3, 1, 3});
  const auto g = gradients<double>(sum(max_pool2d(x)), std::vector{x});
  CHECK(g[0].values() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("batch norm in training mode standardizes every channel") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const std::size_t b = test::extent(rng, 2, 4), c = test::extent(rng, 1, 4);
    const auto x = test::random_tensor<double>(rng, {b, c, 3, 3}, 3.0);
    BatchNormState<double> state(c);
    const auto y = batch_norm2d(x, Tensor<double>::full({c}, 1.0), Tensor<double>::zeros({c}), state, true);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double m = 0, v = 0;
      const std::size_t n = b * 9;
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < 9; ++k) m += y[(i * c + ch) * 9 + k];
      m /= double(n);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < 9; ++k) v += (y[(i * c + ch) * 9 + k] - m) * (y[(i * c + ch) * 9 + k] - m);
      v /= double(n);
      CHECK(std::abs(m) <= 1e-5);
      // eps = 1e-5 in the denominator shrinks the variance by about var / (var + eps).
      CHECK(std::abs(v - 1.0) <= 1e-5);
    }
    // Running statistics moved towards the batch statistics.
    CHECK(state.running_mean != std::vector<double>(c, 0.0));
  }
}

TEST_CASE("batch norm in evaluation mode uses the running statistics") {
  BatchNormState<double> state(1);
  state.running_mean = {2.0};
  state.running_var = {4.0};
  const auto y = batch_norm2d(make<double>({1, 1, 1, 2}, {2, 6}), Tensor<double>::full({1}, 1.0),
                              Tensor<double>::zeros({1}), state, false, 0.0);
  CHECK(y.values() == std::vector<double>{0, 2});
  CHECK(state.running_mean == std::vector<double>{2.0});
}

TEST_CASE("l2_normalize examples") {
  const auto y = l2_normalize(make<double>({2}, {3, 4}), 0);
  CHECK(y[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(l2_normalize(Tensor<double>::zeros({4}), 0).values() == std::vector<double>(4, 0.0));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Shape s = test::random_shape(rng, 3, 1, 5);
    const std::size_t axis = rng.below(3);
    const auto out = l2_normalize(test::random_tensor<float>(rng, s), axis);
    const std::size_t inner = std::accumulate(s.begin() + std::ptrdiff_t(axis) + 1, s.end(), std::size_t{1},
                                              std::multiplies<>());
    for (std::size_t o = 0; o < out.size() / (s[axis] * inner); ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double n2 = 0;
        for (std::size_t k = 0; k < s[axis]; ++k) {
          const double v = out[(o * s[axis] + k) * inner + i];
          n2 += v * v;
        }
        CHECK(std::abs(std::sqrt(n2) - 1.0) <= 1e-6);
      }
  }
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Shape s = test::random_shape(rng, 3, 1, 6);
    const std::size_t axis = rng.below(3);
    const auto y = softmax(test::random_tensor<float>(rng, s, 10.0), axis);
    const auto total = sum(y, axis);
    for (float v : y.values()) CHECK(v >= 0.0f);
    for (float v : total.values()) CHECK(std::abs(v - 1.0f) <= 1e-6f);
  }
}

TEST_CASE("shape utilities") {
  const auto x = make<double>({2, 3}, {0, 1, 2, 3, 4, 5});
  CHECK(permute(x, {1, 0}).values() == std::vector<double>{0, 3, 1, 4, 2, 5});
  CHECK(reshape(x, {3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);
  CHECK(sum(x, 0).values() == std::vector<double>{3, 5, 7});
  CHECK(mean(x, 1).values() == std::vector<double>{1, 4});
  CHECK(index_select(x, {1, 1, 0}).values() == std::vector<double>{3, 4, 5, 3, 4, 5, 0, 1, 2});
  CHECK(concat<double>({x, x}).shape() == Shape{4, 3});
  const auto n = neighborhood_unfold(make<double>({1, 3}, {1, 2, 3}), 1, 3);
  CHECK(n.values() == std::vector<double>{0, 1, 2, 1, 2, 3, 2, 3, 0});
  const auto p = adaptive_avg_pool2d(make<double>({2, 2}, {1, 2, 3, 4}), 1, 1);
  CHECK(p.item() == 2.5);
  CHECK(cross_entropy(Tensor<double>::zeros({4}), {2}).item() == doctest::Approx(std::log(4.0)));
}

TEST_CASE("non-finite values are rejected") {
  CHECK_THROWS_AS(make<double>({1}, {NAN}), NumericError);
  CHECK_THROWS_AS(scale(make<double>({1}, {1e300}), 1e300), NumericError);
  CHECK_THROWS_AS(Tensor<float>({2}, {1.0f}), ShapeError);
}

// ---------------------------------------------------------------------------
// Reverse mode

TEST_CASE("backward examples") {
  ParameterSet<double> params;
  params.add("p", make<double>({3}, {1, -2, 3}));
  const auto& p = params.get("p");
  auto g = backward(sum(p), params);
  CHECK(g.at("p").values() == std::vector<double>{1, 1, 1});
  g = backward(sum(scale(p, 0.0)), params);
  CHECK(g.at("p").values() == std::vector<double>{0, 0, 0});
}

TEST_CASE("backward reaches only ancestors of the loss") {
  ParameterSet<double> params;
  params.add("used", make<double>({2}, {1, 2}));
  params.add("unused", make<double>({2}, {3, 4}));
  const auto loss = sum(mul(params.get("used"), params.get("used")));
  const auto g = backward(loss, params);
  CHECK(g.at("used").values() == std::vector<double>{2, 4});
  CHECK(g.at("unused").values() == std::vector<double>{0, 0});
  CHECK(params.get("used").is_leaf());
}

TEST_CASE("backward is a pure function of the graph") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const auto x = test::random_tensor<float>(rng, {2, 3, 5, 5}).requiring_grad();
    const auto w = test::random_tensor<float>(rng, {4, 3, 3, 3}).requiring_grad();
    const auto loss = sum(softmax(relu(conv2d(x, w, std::optional<Tensor<float>>(), 1, 1)), 1));
    const auto first = gradients<float>(loss, std::vector{x, w});
    const auto second = gradients<float>(loss, std::vector{x, w});
    CHECK(test::bit_equal(first[0], second[0]));
    CHECK(test::bit_equal(first[1], second[1]));
  }
}

TEST_CASE("no recording under NoGradGuard") {
  const auto x = make<double>({2}, {1, 2}).requiring_grad();
  {
    NoGradGuard guard;
    CHECK_FALSE(scale(x, 2.0).requires_grad());
  }
  CHECK(scale(x, 2.0).requires_grad());
}

// ---------------------------------------------------------------------------
// Finite differences over random shapes and seeds

TEST_CASE("every primitive op matches finite differences over random shapes") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    Rng rng(derive_seed(seed, 77));
    const std::uint64_t pj = derive_seed(seed, 78);

    {  // elementwise with broadcasting
      const Shape s = test::random_shape(rng, 3, 1, 4);
      const Shape bs{1, s[2]};
      Case c;
      c.add(rng, s);
      c.add(bs, away_from_zero(rng, numel(bs)));
      for (int op = 0; op < 4; ++op) {
        check_both("elementwise", SCALAR_FN(return project(elementwise(Elementwise(op), in[0], in[1]), pj);), c);
      }
      Case d;
      d.add(rng, s);
      check_both("scale/add_scalar", SCALAR_FN(return project(add_scalar(scale(in[0], T(1.5)), T(-0.25)), pj);), d);
    }
    {  // matmul, plain and batched; linear
      const std::size_t b = test::extent(rng, 1, 3), m = test::extent(rng, 1, 4), k = test::extent(rng, 1, 4),
                        n = test::extent(rng, 1, 4);
      Case c;
      c.add(rng, {m, k});
      c.add(rng, {k, n});
      check_both("matmul", SCALAR_FN(return project(matmul(in[0], in[1]), pj);), c);
      Case cb;
      cb.add(rng, {b, m, k});
      cb.add(rng, {b, k, n});
      check_both("matmul batched", SCALAR_FN(return project(matmul(in[0], in[1]), pj);), cb);
      Case cl;
      cl.add(rng, {b, k});
      cl.add(rng, {n, k});
      cl.add(rng, {n});
      check_both("linear", SCALAR_FN(return project(linear(in[0], in[1], std::optional(in[2])), pj);), cl);
    }
    {  // conv2d
      const std::size_t k = rng.below(2) ? 3 : 1, stride = 1 + rng.below(2), pad = rng.below(2);
      const std::size_t b = test::extent(rng, 1, 2), ci = test::extent(rng, 1, 3), co = test::extent(rng, 1, 3);
      const std::size_t h = test::extent(rng, k, 5), w = test::extent(rng, k, 5);
      Case c;
      c.add(rng, {b, ci, h, w});
      c.add(rng, {co, ci, k, k});
      c.add(rng, {co});
      check_both("conv2d", SCALAR_FN(return project(conv2d(in[0], in[1], std::optional(in[2]), stride, pad), pj);), c);
    }
    {  // conv3d
      const std::size_t kd = rng.below(2) ? 3 : 1, pad = rng.below(2);
      const std::size_t ci = test::extent(rng, 1, 2), co = test::extent(rng, 1, 2);
      const std::size_t d = test::extent(rng, kd, 4), h = test::extent(rng, 3, 4), w = test::extent(rng, 3, 4);
      Case c;
      c.add(rng, {1, ci, d, h, w});
      c.add(rng, {co, ci, kd, 3, 3});
      c.add(rng, {co});
      check_both("conv3d",
                 SCALAR_FN(return project(conv3d(in[0], in[1], std::optional(in[2]), {1, 1, 1}, {pad, pad, pad}), pj);),
                 c);
    }
    {  // kinked ops on inputs that keep clear of their kinks
      const Shape s{test::extent(rng, 1, 3), 2 * test::extent(rng, 1, 3), 2 * test::extent(rng, 1, 3)};
      Case c;
      c.add(s, spread(rng, numel(s)));
      check_both("max_pool2d", SCALAR_FN(return project(max_pool2d(in[0]), pj);), c);
      check_both("relu", SCALAR_FN(return project(relu(in[0]), pj);), c);
    }
    {  // smooth pointwise and reductions
      const Shape s = test::random_shape(rng, 3, 1, 4);
      const std::size_t axis = rng.below(3);
      Case c;
      c.add(rng, s);
      check_both("sigmoid", SCALAR_FN(return project(sigmoid(in[0]), pj);), c);
      check_both("softmax", SCALAR_FN(return project(softmax(in[0], axis), pj);), c);
      check_both("l2_normalize", SCALAR_FN(return project(l2_normalize(in[0], axis), pj);), c);
      check_both("sum/mean", SCALAR_FN(return add(project(sum(in[0], axis), pj), project(mean(in[0], axis), pj + 1));), c);
      check_both("permute/reshape",
                 SCALAR_FN(return project(reshape(permute(in[0], {2, 0, 1}), {numel(s)}), pj);), c);
      check_both("index_select/concat",
                 SCALAR_FN(return project(concat<T>({index_select(in[0], {s[0] - 1, 0}), in[0]}), pj);), c);
    }
    {  // batch norm, both modes
      const std::size_t b = test::extent(rng, 2, 3), ch = test::extent(rng, 1, 3);
      Case c;
      c.add(rng, {b, ch, 2, 3});
      c.add(Shape{ch}, test::uniform(rng, ch, 0.5, 1.5));
      c.add(rng, {ch});
      check_both("batch_norm2d train", SCALAR_FN({
                   BatchNormState<T> st(ch);
                   return project(batch_norm2d(in[0], in[1], in[2], st, true), pj);
                 }),
                 c);
      check_both("batch_norm2d eval", SCALAR_FN({
                   BatchNormState<T> st(ch);
                   return project(batch_norm2d(in[0], in[1], in[2], st, false), pj);
                 }),
                 c);
    }
    {  // neighborhood unfolding and adaptive pooling
      const std::size_t h = test::extent(rng, 1, 4), w = test::extent(rng, 1, 4);
      const std::size_t u = 1 + 2 * rng.below(3), v = 1 + 2 * rng.below(3);
      const std::size_t oh = test::extent(rng, 1, 5), ow = test::extent(rng, 1, 5);
      Case c;
      c.add(rng, {2, h, w});
      check_both("neighborhood_unfold", SCALAR_FN(return project(neighborhood_unfold(in[0], u, v), pj);), c);
      check_both("adaptive_avg_pool2d", SCALAR_FN(return project(adaptive_avg_pool2d(in[0], oh, ow), pj);), c);
    }
    {  // cross entropy
      const std::size_t b = test::extent(rng, 1, 4), n = test::extent(rng, 2, 6);
      std::vector<std::size_t> targets(b);
      for (auto& t : targets) t = rng.below(n);
      Case c;
      c.add(rng, {b, n}, 2.0);
      check_both("cross_entropy", SCALAR_FN(return cross_entropy(in[0], targets);), c);
    }
  }
}

TEST_CASE("gradient sweep: primitive ops pass in 64-bit on 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    GradcheckSuiteOptions options;
    options.seed = seed;
    options.include_pipeline = false;
    for (const auto& r : run_gradcheck_suite<double>(options)) {
      if (r.name.find('.') != std::string::npos || r.name.rfind("loss", 0) == 0) continue;  // module functions
      INFO("seed " << seed << " " << r.name << " worst " << r.result.worst);
      CHECK(r.passed());
    }
  }
}
