// Parallel kernels against the serial reference, and against themselves at
// different thread counts.

#include <omp.h>

#include <cmath>

#include "doctest.h"
#include "ficnet/kernels.hpp"
#include "support.hpp"

using namespace ficnet;
using kernels::ConvGeometry;
using kernels::Trans;

namespace {

template <class T>
std::vector<T> rand_vec(Rng& rng, std::size_t n) {
  std::vector<T> v(n);
  for (auto& x : v) x = T(rng.uniform(-1, 1));
  return v;
}

template <class T>
double rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(double(a[i]) - double(b[i])));
    den = std::max(den, std::abs(double(b[i])));
  }
  return num / std::max(den, 1e-30);
}

template <class T>
constexpr double kernel_tol() {
  return sizeof(T) == 4 ? 1e-5 : 1e-13;
}

class ThreadScope {
 public:
  explicit ThreadScope(int n) : saved_(omp_get_max_threads()) { omp_set_num_threads(n); }
  ~ThreadScope() { omp_set_num_threads(saved_); }

 private:
  int saved_;
};

template <class T>
std::vector<T> run_gemm(bool parallel, Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
                        const std::vector<T>& a, const std::vector<T>& b, T beta, std::vector<T> c) {
  const std::size_t lda = ta == Trans::kNo ? k : m, ldb = tb == Trans::kNo ? n : k;
  if (parallel) {
    kernels::gemm<T>(ta, tb, m, n, k, alpha, a.data(), lda, b.data(), ldb, beta, c.data(), n);
  } else {
    kernels::reference::gemm<T>(ta, tb, m, n, k, alpha, a.data(), lda, b.data(), ldb, beta, c.data(), n);
  }
  return c;
}

ConvGeometry random_geometry(Rng& rng, bool three_d) {
  ConvGeometry g;
  g.in_channels = test::extent(rng, 1, 5);
  g.out_channels = test::extent(rng, 1, 6);
  g.k_h = rng.below(2) ? 3 : 1;
  g.k_w = rng.below(2) ? 3 : 1;
  g.k_d = three_d && rng.below(2) ? 3 : 1;
  g.in_h = test::extent(rng, g.k_h, 9);
  g.in_w = test::extent(rng, g.k_w, 9);
  g.in_d = three_d ? test::extent(rng, g.k_d, 5) : 1;
  g.stride_h = 1 + rng.below(2);
  g.stride_w = 1 + rng.below(2);
  g.stride_d = three_d ? 1 + rng.below(2) : 1;
  g.pad_h = rng.below(2) * (g.k_h / 2);
  g.pad_w = rng.below(2) * (g.k_w / 2);
  g.pad_d = rng.below(2) * (g.k_d / 2);
  return g;
}

template <class T>
void conv_case(std::uint64_t seed, bool three_d) {
  Rng rng(seed);
  const ConvGeometry g = random_geometry(rng, three_d);
  REQUIRE(g.valid());
  const std::size_t batch = test::extent(rng, 1, 3);
  const auto x = rand_vec<T>(rng, batch * g.in_channels * g.in_positions());
  const auto w = rand_vec<T>(rng, g.out_channels * g.patch_size());
  const auto bias = rand_vec<T>(rng, g.out_channels);
  const auto gy = rand_vec<T>(rng, batch * g.out_channels * g.out_positions());
  const std::size_t ny = gy.size();

  std::vector<T> y_ref(ny), gx_ref(x.size(), T(0)), gw_ref(w.size(), T(0)), gb_ref(bias.size(), T(0));
  kernels::reference::conv_forward<T>(g, batch, x.data(), w.data(), bias.data(), y_ref.data());
  kernels::reference::conv_backward<T>(g, batch, x.data(), w.data(), gy.data(), gx_ref.data(), gw_ref.data(),
                                       gb_ref.data());

  std::vector<T> y_first, gx_first, gw_first;
  for (int threads : {1, 2, 3, 8}) {
    ThreadScope scope(threads);
    std::vector<T> y(ny), gx(x.size(), T(0)), gw(w.size(), T(0)), gb(bias.size(), T(0));
    kernels::conv_forward<T>(g, batch, x.data(), w.data(), bias.data(), y.data());
    kernels::conv_backward<T>(g, batch, x.data(), w.data(), gy.data(), gx.data(), gw.data(), gb.data());
    CHECK(rel_diff(y, y_ref) <= kernel_tol<T>());
    CHECK(rel_diff(gx, gx_ref) <= kernel_tol<T>());
    CHECK(rel_diff(gw, gw_ref) <= kernel_tol<T>());
    CHECK(rel_diff(gb, gb_ref) <= kernel_tol<T>());
    if (y_first.empty()) {
      y_first = y;
      gx_first = gx;
      gw_first = gw;
    } else {
      CHECK(y == y_first);
      CHECK(gx == gx_first);
      CHECK(gw == gw_first);
    }
  }
}

}  // namespace

TEST_CASE_TEMPLATE("gemm matches the reference for every transpose combination", T, float, double) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    // Sizes straddle the packing panel widths.
    const std::size_t m = test::extent(rng, 1, 70), n = test::extent(rng, 1, 70), k = test::extent(rng, 1, 300);
    const Trans ta = rng.below(2) ? Trans::kYes : Trans::kNo, tb = rng.below(2) ? Trans::kYes : Trans::kNo;
    const T alpha = T(rng.uniform(-2, 2)), beta = rng.below(3) == 0 ? T(0) : T(rng.uniform(-1, 1));
    const auto a = rand_vec<T>(rng, m * k), b = rand_vec<T>(rng, k * n), c = rand_vec<T>(rng, m * n);
    CAPTURE(seed);
    const auto ref = run_gemm<T>(false, ta, tb, m, n, k, alpha, a, b, beta, c);
    std::vector<T> first;
    for (int threads : {1, 2, 4}) {
      ThreadScope scope(threads);
      const auto got = run_gemm<T>(true, ta, tb, m, n, k, alpha, a, b, beta, c);
      CHECK(rel_diff(got, ref) <= kernel_tol<T>());
      if (first.empty()) first = got;
      CHECK(got == first);
    }
  }
}

TEST_CASE("gemm with beta = 0 ignores NaN in C") {
  const std::vector<double> a{1, 2}, b{3, 4};
  std::vector<double> c{NAN};
  kernels::gemm<double>(Trans::kNo, Trans::kNo, 1, 1, 2, 1.0, a.data(), 2, b.data(), 1, 0.0, c.data(), 1);
  CHECK(c[0] == 11.0);
}

TEST_CASE_TEMPLATE("2-D convolution kernels match the reference", T, float, double) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    CAPTURE(seed);
    conv_case<T>(seed, false);
  }
}

TEST_CASE_TEMPLATE("3-D convolution kernels match the reference", T, float, double) {
  for (std::uint64_t seed = 100; seed < 130; ++seed) {
    CAPTURE(seed);
    conv_case<T>(seed, true);
  }
}

TEST_CASE("im2col and col2im are adjoint") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const ConvGeometry g = random_geometry(rng, seed % 2 == 1);
    const auto img = rand_vec<double>(rng, g.in_channels * g.in_positions());
    const auto col = rand_vec<double>(rng, g.patch_size() * g.out_positions());
    std::vector<double> unfolded(col.size()), folded(img.size(), 0.0);
    kernels::im2col<double>(g, img.data(), unfolded.data(), g.out_positions(), 0);
    kernels::col2im<double>(g, col.data(), g.out_positions(), 0, folded.data());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < col.size(); ++i) lhs += unfolded[i] * col[i];
    for (std::size_t i = 0; i < img.size(); ++i) rhs += img[i] * folded[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}
