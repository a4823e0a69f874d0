#include "ficnet/testkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace ficnet::testkit {

namespace {

template <class T>
std::vector<std::vector<T>> analytic_gradients(const ScalarFn<T>& fn, const std::vector<Tensor<T>>& leaves) {
  const bool previous = GradMode::enabled();
  GradMode::set_enabled(true);
  const Tensor<T> out = fn(leaves);
  if (out.size() != 1) {
    GradMode::set_enabled(previous);
    throw std::invalid_argument("gradcheck: function must return a scalar");
  }
  const auto grads = gradients(out, std::span<const Tensor<T>>(leaves));
  GradMode::set_enabled(previous);
  std::vector<std::vector<T>> result;
  for (const auto& g : grads) result.push_back(g.values());
  return result;
}

// Central differences of `fn` compared element by element with `analytic`.
template <class U, class T>
GradcheckResult compare(const ScalarFn<U>& fn, const std::vector<Tensor<U>>& inputs,
                        const std::vector<std::vector<T>>& analytic, double h) {
  GradcheckResult result;
  NoGradGuard off;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<U>& base = inputs[k].values();
    std::vector<Tensor<U>> args = inputs;
    for (std::size_t i = 0; i < base.size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<U> moved = base;
        moved[i] = U(double(base[i]) + delta);
        args[k] = Tensor<U>(inputs[k].shape(), std::move(moved));
        return double(fn(args).item());
      };
      // Use the step actually representable in U.
      const double plus = double(U(double(base[i]) + h)) - double(base[i]);
      const double minus = double(base[i]) - double(U(double(base[i]) - h));
      const double numeric = (eval(h) - eval(-h)) / (plus + minus);
      const double a = double(analytic[k][i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.elements;
      result.relative.push_back(rel);
      result.analytic_values.push_back(a);
      if (rel > result.worst || std::isnan(rel)) {
        result.worst = std::isnan(rel) ? std::numeric_limits<double>::infinity() : rel;
        result.worst_input = k;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
    args[k] = inputs[k];
  }
  return result;
}

}  // namespace

template <class T>
GradcheckResult gradcheck(const ScalarFn<T>& fn, const std::vector<Tensor<T>>& inputs, double h) {
  std::vector<Tensor<T>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(t.detached().requiring_grad());
  const auto analytic = analytic_gradients(fn, leaves);
  std::vector<Tensor<T>> plain;
  for (const auto& t : inputs) plain.push_back(t.detached());
  return compare(fn, plain, analytic, h);
}

template <class T>
GradcheckResult gradcheck_against(const ScalarFn<T>& fn, const ScalarFn<double>& reference,
                                  const std::vector<Tensor<double>>& inputs, double h) {
  std::vector<Tensor<T>> leaves;
  std::vector<Tensor<double>> plain;
  for (const auto& t : inputs) {
    const Tensor<T> narrow = t.detached().template cast<T>();
    if (narrow.template cast<double>().values() != t.values()) {
      throw std::invalid_argument("gradcheck_against: inputs are not representable in the checked precision");
    }
    leaves.push_back(narrow.requiring_grad());
    plain.push_back(t.detached());
  }
  const auto analytic = analytic_gradients(fn, leaves);
  return compare(reference, plain, analytic, h);
}

template GradcheckResult gradcheck_against<float>(const ScalarFn<float>&, const ScalarFn<double>&,
                                                  const std::vector<Tensor<double>>&, double);
template GradcheckResult gradcheck_against<double>(const ScalarFn<double>&, const ScalarFn<double>&,
                                                   const std::vector<Tensor<double>>&, double);
template GradcheckResult gradcheck<float>(const ScalarFn<float>&, const std::vector<Tensor<float>>&, double);
template GradcheckResult gradcheck<double>(const ScalarFn<double>&, const std::vector<Tensor<double>>&, double);

std::vector<double> dense_cross_attention_reference(const std::vector<double>& x, std::size_t batch,
                                                    std::size_t channels, std::size_t height, std::size_t width,
                                                    const std::vector<double>& wq, const std::vector<double>& bq,
                                                    const std::vector<double>& wk, const std::vector<double>& bk,
                                                    const std::vector<double>& wv, const std::vector<double>& bv,
                                                    std::size_t qk_channels) {
  const std::size_t hw = height * width;
  auto project = [&](const std::vector<double>& w, const std::vector<double>& b, std::size_t out, std::size_t n) {
    std::vector<double> y(out * hw);
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t p = 0; p < hw; ++p) {
        double acc = b[o];
        for (std::size_t c = 0; c < channels; ++c) acc += w[o * channels + c] * x[(n * channels + c) * hw + p];
        y[o * hw + p] = acc;
      }
    return y;
  };

  std::vector<double> out(x.size());
  for (std::size_t n = 0; n < batch; ++n) {
    const auto q = project(wq, bq, qk_channels, n);
    const auto k = project(wk, bk, qk_channels, n);
    const auto v = project(wv, bv, channels, n);
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t py = p / width, px = p % width;
      std::vector<double> logits(hw);
      for (std::size_t r = 0; r < hw; ++r) {
        const std::size_t ry = r / width, rx = r % width;
        double e = 0;
        for (std::size_t c = 0; c < qk_channels; ++c) e += q[c * hw + p] * k[c * hw + r];
        const bool on_cross = ry == py || rx == px;
        logits[r] = on_cross ? e : e - 1e30;
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (double l : logits) mx = std::max(mx, l);
      double z = 0;
      for (double l : logits) z += std::exp(l - mx);
      for (std::size_t c = 0; c < channels; ++c) {
        double acc = 0;
        for (std::size_t r = 0; r < hw; ++r) acc += std::exp(logits[r] - mx) * v[c * hw + r];
        out[(n * channels + c) * hw + p] = acc / z + x[(n * channels + c) * hw + p];
      }
    }
  }
  return out;
}

std::vector<double> neighborhood_reference(const std::vector<double>& x, std::size_t batch, std::size_t channels,
                                           std::size_t height, std::size_t width, std::size_t u, std::size_t v) {
  const long hu = long(u / 2), hv = long(v / 2);
  std::vector<double> out(batch * channels * height * width * u * v, 0.0);
  auto at = [&](std::size_t n, std::size_t c, long y, long xx) {
    return x[((n * channels + c) * height + std::size_t(y)) * width + std::size_t(xx)];
  };
  for (std::size_t n = 0; n < batch; ++n)
    for (long y = 0; y < long(height); ++y)
      for (long xx = 0; xx < long(width); ++xx) {
        double center_norm = 0;
        for (std::size_t c = 0; c < channels; ++c) center_norm += at(n, c, y, xx) * at(n, c, y, xx);
        center_norm = std::sqrt(center_norm);
        for (long a = 0; a < long(u); ++a)
          for (long b = 0; b < long(v); ++b) {
            const long ny = y + a - hu, nx = xx + b - hv;
            if (ny < 0 || nx < 0 || ny >= long(height) || nx >= long(width)) continue;
            const double dist = std::sqrt(double((a - hu) * (a - hu) + (b - hv) * (b - hv)));
            const double weight = 1.0 / (dist + 1.0);
            double nb_norm = 0;
            for (std::size_t c = 0; c < channels; ++c) nb_norm += std::pow(weight * at(n, c, ny, nx), 2);
            nb_norm = std::sqrt(nb_norm);
            for (std::size_t c = 0; c < channels; ++c) {
              const double lhs = center_norm > 0 ? at(n, c, y, xx) / center_norm : 0.0;
              const double rhs = nb_norm > 0 ? weight * at(n, c, ny, nx) / nb_norm : 0.0;
              const std::size_t idx =
                  ((((n * channels + c) * height + std::size_t(y)) * width + std::size_t(xx)) * u + std::size_t(a)) *
                      v +
                  std::size_t(b);
              out[idx] = lhs * rhs;
            }
          }
      }
  return out;
}

std::vector<std::size_t> protonet_reference(const std::vector<std::vector<double>>& support,
                                            const std::vector<std::size_t>& support_labels,
                                            const std::vector<std::vector<double>>& queries, std::size_t way,
                                            std::size_t channels, RefMetric metric) {
  auto pool = [&](const std::vector<double>& e) {
    const std::size_t spatial = e.size() / channels;
    std::vector<double> p(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t s = 0; s < spatial; ++s) p[c] += e[c * spatial + s];
      p[c] /= double(spatial);
    }
    return p;
  };
  std::vector<std::vector<double>> protos(way, std::vector<double>(channels, 0.0));
  std::vector<std::size_t> counts(way, 0);
  for (std::size_t i = 0; i < support.size(); ++i) {
    const auto p = pool(support[i]);
    for (std::size_t c = 0; c < channels; ++c) protos[support_labels[i]][c] += p[c];
    ++counts[support_labels[i]];
  }
  for (std::size_t k = 0; k < way; ++k)
    for (auto& v : protos[k]) v /= double(counts[k]);

  std::vector<std::size_t> out;
  for (const auto& q : queries) {
    const auto p = pool(q);
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < way; ++k) {
      double score = 0;
      if (metric == RefMetric::kCosine) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t c = 0; c < channels; ++c) {
          dot += p[c] * protos[k][c];
          na += p[c] * p[c];
          nb += protos[k][c] * protos[k][c];
        }
        score = (na > 0 && nb > 0) ? dot / (std::sqrt(na) * std::sqrt(nb)) : 0.0;
      } else if (metric == RefMetric::kEuclidean) {
        for (std::size_t c = 0; c < channels; ++c) score -= (p[c] - protos[k][c]) * (p[c] - protos[k][c]);
      } else {
        for (std::size_t c = 0; c < channels; ++c) score -= std::abs(p[c] - protos[k][c]);
      }
      if (score > best_score) {
        best_score = score;
        best = k;
      }
    }
    out.push_back(best);
  }
  return out;
}

double dct_reference(std::size_t i, std::size_t j, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  const double pi = std::numbers::pi;
  const double ci = i == 0 ? std::sqrt(1.0 / double(h)) : std::sqrt(2.0 / double(h));
  const double cj = j == 0 ? std::sqrt(1.0 / double(w)) : std::sqrt(2.0 / double(w));
  return ci * cj * std::cos(pi * double(i) * (double(y) + 0.5) / double(h)) *
         std::cos(pi * double(j) * (double(x) + 0.5) / double(w));
}

std::pair<double, double> mean_ci95_reference(const std::vector<double>& values) {
  const double n = double(values.size());
  double sum = 0;
  for (double v : values) sum += v;
  const double mean = sum / n;
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, 1.96 * std::sqrt(ss / (n - 1)) / std::sqrt(n)};
}

double softmax_ce_reference(const std::vector<double>& scores, std::size_t target, double t) {
  long double z = 0;
  for (double s : scores) z += std::exp((long double)s / t);
  return double(-(std::log(std::exp((long double)scores[target] / t)) - std::log(z)));
}

}  // namespace ficnet::testkit
