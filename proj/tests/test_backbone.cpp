#include <cmath>

#include "doctest.h"
#include "ficnet/backbone.hpp"
#include "support.hpp"

using namespace ficnet;

namespace {

BackboneConfig config(std::size_t side, std::size_t channels = 64, std::size_t blocks = 4) {
  BackboneConfig c;
  c.input_side = side;
  c.block_channels = channels;
  c.num_blocks = blocks;
  return c;
}

Tensor<float> images(Rng& rng, std::size_t b, std::size_t side) {
  return test::make<float>({b, 3, side, side}, test::uniform(rng, b * 3 * side * side, 0.0, 1.0));
}

}  // namespace

TEST_CASE("embedding extents follow conv(pad 1) + pool(2) per block") {
  CHECK(config(84).output_side() == 5);
  CHECK(config(32).output_side() == 2);
  CHECK(config(8).output_side() == 0);
  CHECK_THROWS_AS(config(8).validate(), ConfigError);

  Rng rng(1);
  for (std::size_t side : {84u, 32u}) {
    const auto cfg = config(side);
    Backbone<float> net(cfg);
    const auto params = init_backbone_params<float>(cfg, 3);
    const auto out = net.embed(images(rng, 2, side), params, true);
    CHECK(out.channels() == 64);
    CHECK(out.height() == cfg.output_side());
    CHECK(out.width() == cfg.output_side());
    CHECK(out.stage == Stage::kBasic);
  }
}

TEST_CASE("zero image gives a finite embedding") {
  const auto cfg = config(32);
  Backbone<double> net(cfg);
  const auto params = init_backbone_params<double>(cfg, 0);
  const auto out = net.embed(Tensor<double>::zeros({2, 3, 32, 32}), params, true);
  for (double v : out.tensor.values()) CHECK(std::isfinite(v));
  const auto single = net.embed(Tensor<double>::zeros({1, 3, 32, 32}), params, true);
  for (double v : single.tensor.values()) CHECK(std::isfinite(v));
}

TEST_CASE("initialization is seed-determined") {
  const auto cfg = config(32);
  const auto a = init_backbone_params<float>(cfg, 11);
  const auto b = init_backbone_params<float>(cfg, 11);
  const auto c = init_backbone_params<float>(cfg, 12);
  CHECK(test::same_params(a, b));
  CHECK_FALSE(test::same_params(a, c));
}

TEST_CASE("a 64x64x3x3 weight block is centered") {
  const auto params = init_backbone_params<double>(config(32), 5);
  const auto& w = params.get(Backbone<double>::param_name(1, "conv.weight"));
  REQUIRE(w.shape() == Shape{64, 64, 3, 3});
  double m = 0;
  for (double v : w.values()) m += v;
  m /= double(w.size());
  CHECK(std::abs(m) <= 0.01);
}

TEST_CASE("inference is deterministic and leaves the running statistics alone") {
  const auto cfg = config(32, 8, 4);
  Backbone<float> net(cfg);
  const auto params = init_backbone_params<float>(cfg, 2);
  Rng rng(4);
  const auto x = images(rng, 3, 32);
  net.embed(x, params, true);  // move the running statistics off their defaults
  const auto before = net.bn_states()[0].running_mean;
  const auto a = std::as_const(net).embed(x, params);
  const auto b = net.embed(x, params, false);
  CHECK(test::bit_equal(a.tensor, b.tensor));
  CHECK(net.bn_states()[0].running_mean == before);
  net.embed(x, params, true);
  CHECK(net.bn_states()[0].running_mean != before);
}

TEST_CASE("translating the input by one output stride translates the interior") {
  for (std::size_t blocks : {1u, 2u}) {
    const std::size_t side = 16 * blocks, stride = std::size_t{1} << blocks;
    const auto cfg = config(side, 6, blocks);
    Backbone<double> net(cfg);
    const auto params = init_backbone_params<double>(cfg, 9);
    Rng rng(blocks);
    auto& bn = net.bn_states();
    for (auto& s : bn) {
      for (auto& m : s.running_mean) m = rng.uniform(-0.2, 0.2);
      for (auto& v : s.running_var) v = rng.uniform(0.5, 2.0);
    }
    const auto base = test::uniform(rng, 3 * side * side, 0.0, 1.0);
    // Shift right by `stride` pixels; new columns get fresh values.
    std::vector<double> shifted(base.size());
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
          const std::size_t i = (c * side + y) * side + x;
          shifted[i] = x >= stride ? base[i - stride] : rng.uniform(0.0, 1.0);
        }
    const auto a = std::as_const(net).embed(test::make<double>({1, 3, side, side}, base), params);
    const auto b = std::as_const(net).embed(test::make<double>({1, 3, side, side}, shifted), params);
    const std::size_t c = a.channels(), n = a.width();
    // Receptive fields of columns 1 .. n - 3 stay clear of the borders and of
    // the new columns.
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 1; x + 3 <= n; ++x) {
          const double va = a.tensor[(ch * n + y) * n + x];
          const double vb = b.tensor[(ch * n + y) * n + x + 1];
          CHECK(std::abs(va - vb) <= 1e-12);
        }
  }
}
