// Parallel kernels against the serial reference on the shapes the pipeline
// actually runs: backbone convolutions, the 3-D correlation refinement and the
// 1x1 projections (plain gemm).
//
//   build/bench/bench_kernels --benchmark_filter=Conv2d
//   OMP_NUM_THREADS=4 build/bench/bench_kernels

#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>
#include <vector>

#include "ficnet/kernels.hpp"

using namespace ficnet::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

template <bool kParallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (kParallel) {
      gemm<float>(Trans::kNo, Trans::kNo, n, n, n, 1.0f, a.data(), n, b.data(), n, 0.0f, c.data(), n);
    } else {
      reference::gemm<float>(Trans::kNo, Trans::kNo, n, n, n, 1.0f, a.data(), n, b.data(), n, 0.0f, c.data(), n);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * double(n * n * n), benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
  state.counters["threads"] = kParallel ? omp_get_max_threads() : 1;
}

// Backbone block: 3x3, pad 1, C -> 64 on an episode of 30 images.
ConvGeometry backbone_block(std::size_t side, std::size_t in_channels) {
  ConvGeometry g;
  g.in_channels = in_channels;
  g.out_channels = 64;
  g.in_h = g.in_w = side;
  g.k_h = g.k_w = 3;
  g.pad_h = g.pad_w = 1;
  return g;
}

// Correlation refinement: one channel, HW x (H x W) volume per pair, 3x3x3.
ConvGeometry refinement(std::size_t side) {
  ConvGeometry g;
  g.in_d = side * side;
  g.in_h = g.in_w = side;
  g.k_d = g.k_h = g.k_w = 3;
  g.pad_d = g.pad_h = g.pad_w = 1;
  return g;
}

template <bool kParallel>
void run_conv(benchmark::State& state, const ConvGeometry& g, std::size_t batch, bool backward) {
  const auto x = random_vec(batch * g.in_channels * g.in_positions(), 3);
  const auto w = random_vec(g.out_channels * g.patch_size(), 4);
  const auto bias = random_vec(g.out_channels, 5);
  const auto gy = random_vec(batch * g.out_channels * g.out_positions(), 6);
  std::vector<float> y(gy.size()), gx(x.size()), gw(w.size()), gb(bias.size());
  for (auto _ : state) {
    if (backward) {
      if constexpr (kParallel) {
        conv_backward<float>(g, batch, x.data(), w.data(), gy.data(), gx.data(), gw.data(), gb.data());
      } else {
        reference::conv_backward<float>(g, batch, x.data(), w.data(), gy.data(), gx.data(), gw.data(), gb.data());
      }
      benchmark::DoNotOptimize(gx.data());
    } else {
      if constexpr (kParallel) {
        conv_forward<float>(g, batch, x.data(), w.data(), bias.data(), y.data());
      } else {
        reference::conv_forward<float>(g, batch, x.data(), w.data(), bias.data(), y.data());
      }
      benchmark::DoNotOptimize(y.data());
    }
  }
  const double macs = double(batch * g.out_channels * g.out_positions() * g.patch_size());
  state.counters["GFLOPS"] = benchmark::Counter((backward ? 4.0 : 2.0) * macs, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
  state.counters["threads"] = kParallel ? omp_get_max_threads() : 1;
}

template <bool kParallel>
void BM_Conv2dForward(benchmark::State& state) {
  const auto side = std::size_t(state.range(0));
  run_conv<kParallel>(state, backbone_block(side, side == 32 ? 3 : 64), 30, false);
}

template <bool kParallel>
void BM_Conv2dBackward(benchmark::State& state) {
  const auto side = std::size_t(state.range(0));
  run_conv<kParallel>(state, backbone_block(side, side == 32 ? 3 : 64), 30, true);
}

template <bool kParallel>
void BM_Conv3dForward(benchmark::State& state) {
  run_conv<kParallel>(state, refinement(std::size_t(state.range(0))), 75, false);
}

template <bool kParallel>
void BM_Conv3dBackward(benchmark::State& state) {
  run_conv<kParallel>(state, refinement(std::size_t(state.range(0))), 75, true);
}

}  // namespace

BENCHMARK(BM_Gemm<true>)->Name("Gemm/parallel")->Arg(64)->Arg(256)->Arg(512)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Gemm<false>)->Name("Gemm/reference")->Arg(64)->Arg(256)->Arg(512)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Conv2dForward<true>)->Name("Conv2dForward/parallel")->Arg(32)->Arg(16)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2dForward<false>)->Name("Conv2dForward/reference")->Arg(32)->Arg(16)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2dBackward<true>)->Name("Conv2dBackward/parallel")->Arg(32)->Arg(16)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2dBackward<false>)->Name("Conv2dBackward/reference")->Arg(32)->Arg(16)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3dForward<true>)->Name("Conv3dForward/parallel")->Arg(2)->Arg(5)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3dForward<false>)->Name("Conv3dForward/reference")->Arg(2)->Arg(5)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3dBackward<true>)->Name("Conv3dBackward/parallel")->Arg(2)->Arg(5)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3dBackward<false>)->Name("Conv3dBackward/reference")->Arg(2)->Arg(5)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
