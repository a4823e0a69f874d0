#include "ficnet/dcm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace ficnet {

void DcmConfig::validate(std::size_t channels) const {
  if (use_bcc && loops < 1) throw ConfigError("criss-cross loop count must be at least 1");
  if (qk_ratio == 0 || channels / qk_ratio == 0) {
    throw ConfigError("query/key ratio " + std::to_string(qk_ratio) + " leaves no channels out of " +
                      std::to_string(channels));
  }
  if (!(temperature > 0.0)) throw ConfigError("attention temperature must be positive");
}

namespace {

// Flat (row, column) of the i-th position on the cross path through (h, w).
inline std::size_t cross_offset(std::size_t h, std::size_t w, std::size_t i, std::size_t height,
                                std::size_t width) {
  if (i < width) return h * width + i;
  std::size_t r = i - width;
  if (r >= h) ++r;
  (void)height;
  return r * width + w;
}

template <class T>
void check_qkv(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>* v) {
  if (q.rank() != 4 || k.shape() != q.shape()) {
    throw ShapeError("criss-cross query/key must share a [B x C x H x W] shape, got " + shape_string(q.shape()) +
                     " and " + shape_string(k.shape()));
  }
  if (v && (v->rank() != 4 || v->dim(0) != q.dim(0) || v->dim(2) != q.dim(2) || v->dim(3) != q.dim(3))) {
    throw ShapeError("criss-cross value " + shape_string(v->shape()) + " does not match " + shape_string(q.shape()));
  }
}

// Softmax weights for every position, [B x HW x L].
template <class T>
std::vector<T> cross_weights(const Tensor<T>& q, const Tensor<T>& k) {
  const std::size_t bsz = q.dim(0), c = q.dim(1), h = q.dim(2), w = q.dim(3);
  const std::size_t hw = h * w, len = h + w - 1;
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  std::vector<T> weights(bsz * hw * len);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bp = 0; bp < std::ptrdiff_t(bsz * hw); ++bp) {
    const std::size_t b = std::size_t(bp) / hw, p = std::size_t(bp) % hw;
    const T* qb = qv + b * c * hw;
    const T* kb = kv + b * c * hw;
    T* r = weights.data() + std::size_t(bp) * len;
    T top = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t o = cross_offset(p / w, p % w, i, h, w);
      T e = 0;
      for (std::size_t ch = 0; ch < c; ++ch) e += qb[ch * hw + p] * kb[ch * hw + o];
      r[i] = e;
      top = std::max(top, e);
    }
    T total = 0;
    for (std::size_t i = 0; i < len; ++i) total += (r[i] = std::exp(r[i] - top));
    for (std::size_t i = 0; i < len; ++i) r[i] /= total;
  }
  return weights;
}

}  // namespace

template <class T>
std::vector<T> criss_cross_weights(const Tensor<T>& q, const Tensor<T>& k) {
  check_qkv(q, k, static_cast<const Tensor<T>*>(nullptr));
  return cross_weights(q, k);
}

template <class T>
Tensor<T> criss_cross_aggregate(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  check_qkv(q, k, &v);
  const std::size_t bsz = q.dim(0), c = q.dim(1), h = q.dim(2), w = q.dim(3), cv = v.dim(1);
  const std::size_t hw = h * w, len = h + w - 1;
  auto weights = std::make_shared<const std::vector<T>>(cross_weights(q, k));

  std::vector<T> out(bsz * cv * hw, T(0));
  const T* vv = v.data().data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bp = 0; bp < std::ptrdiff_t(bsz * hw); ++bp) {
    const std::size_t b = std::size_t(bp) / hw, p = std::size_t(bp) % hw;
    const T* r = weights->data() + std::size_t(bp) * len;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t o = cross_offset(p / w, p % w, i, h, w);
      for (std::size_t ch = 0; ch < cv; ++ch) out[(b * cv + ch) * hw + p] += r[i] * vv[(b * cv + ch) * hw + o];
    }
  }

  auto backward = [weights, bsz, c, h, w, cv](const detail::Node<T>& self, std::span<const T> g,
                                              std::span<std::vector<T>* const> gin) {
    const std::size_t hw = h * w, len = h + w - 1;
    const std::vector<T>& qv = self.parents[0]->value;
    const std::vector<T>& kv = self.parents[1]->value;
    const std::vector<T>& vv = self.parents[2]->value;
    std::vector<T>* gq = gin[0];
    std::vector<T>* gk = gin[1];
    std::vector<T>* gv = gin[2];
    // Scatters stay within one batch item, so items run in parallel.
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t bi = 0; bi < std::ptrdiff_t(bsz); ++bi) {
      const std::size_t b = std::size_t(bi);
      std::vector<T> gr(len);
      for (std::size_t p = 0; p < hw; ++p) {
        const T* r = weights->data() + (b * hw + p) * len;
        T dot = 0;
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t o = cross_offset(p / w, p % w, i, h, w);
          T acc = 0;
          for (std::size_t ch = 0; ch < cv; ++ch) {
            const T go = g[(b * cv + ch) * hw + p];
            acc += go * vv[(b * cv + ch) * hw + o];
            if (gv) (*gv)[(b * cv + ch) * hw + o] += r[i] * go;
          }
          gr[i] = acc;
          dot += r[i] * acc;
        }
        for (std::size_t i = 0; i < len; ++i) {
          const T ge = r[i] * (gr[i] - dot);
          const std::size_t o = cross_offset(p / w, p % w, i, h, w);
          for (std::size_t ch = 0; ch < c; ++ch) {
            if (gq) (*gq)[(b * c + ch) * hw + p] += ge * kv[(b * c + ch) * hw + o];
            if (gk) (*gk)[(b * c + ch) * hw + o] += ge * qv[(b * c + ch) * hw + p];
          }
        }
      }
    }
  };
  return Tensor<T>::from_op("criss_cross_aggregate", {bsz, cv, h, w}, std::move(out), {q, k, v}, backward);
}

template <class T>
Tensor<T> crisscross_step(const Tensor<T>& x, const ParameterSet<T>& params) {
  using Opt = std::optional<Tensor<T>>;
  const Tensor<T> q = conv2d(x, params.get("dcm.cc.query.weight"), Opt(params.get("dcm.cc.query.bias")));
  // A key bias would add q_p . b to every logit of position p; softmax ignores it.
  const Tensor<T> k = conv2d(x, params.get("dcm.cc.key.weight"), Opt());
  const Tensor<T> v = conv2d(x, params.get("dcm.cc.value.weight"), Opt(params.get("dcm.cc.value.bias")));
  return add(criss_cross_aggregate(q, k, v), x);
}

template <class T>
Tensor<T> bcc(const Tensor<T>& basic, const Tensor<T>& prime, const ParameterSet<T>& params, std::size_t loops) {
  if (loops < 1) throw ConfigError("criss-cross loop count must be at least 1");
  if (basic.shape() != prime.shape()) {
    throw ShapeError("bcc inputs differ: " + shape_string(basic.shape()) + " vs " + shape_string(prime.shape()));
  }
  Tensor<T> x = basic;
  for (std::size_t l = 0; l < loops; ++l) x = crisscross_step(x, params);
  return add(x, prime);
}

template <class T>
Tensor<T> class_prototypes(const Tensor<T>& x, const std::vector<std::size_t>& labels, std::size_t n) {
  if (x.rank() == 0 || x.dim(0) != labels.size()) throw ShapeError("class_prototypes: one label per row required");
  const std::size_t row = x.size() / std::max<std::size_t>(labels.size(), 1);
  std::vector<std::size_t> count(n, 0);
  for (std::size_t l : labels) {
    if (l >= n) throw ShapeError("class_prototypes: label " + std::to_string(l) + " out of range");
    ++count[l];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (count[i] == 0) throw ShapeError("class_prototypes: class " + std::to_string(i) + " has no rows");
  }
  std::vector<T> out(n * row, T(0));
  const auto& xv = x.values();
  for (std::size_t r = 0; r < labels.size(); ++r)
    for (std::size_t j = 0; j < row; ++j) out[labels[r] * row + j] += xv[r * row + j];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < row; ++j) out[i * row + j] /= T(count[i]);
  Shape shape = x.shape();
  shape[0] = n;
  return Tensor<T>::from_op("class_prototypes", std::move(shape), std::move(out), {x},
                            [labels, count, row](const auto&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                              auto& gx = *gin[0];
                              for (std::size_t r = 0; r < labels.size(); ++r) {
                                const T inv = T(1) / T(count[labels[r]]);
                                for (std::size_t j = 0; j < row; ++j) gx[r * row + j] += g[labels[r] * row + j] * inv;
                              }
                            });
}

namespace {

template <class T>
void check_maps(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError(std::string(what) + ": incompatible maps " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
}

}  // namespace

template <class T>
Tensor<T> correlation_4d(const Tensor<T>& support, const Tensor<T>& query) {
  check_maps(support, query, "correlation_4d");
  if (support.dim(0) != query.dim(0)) throw ShapeError("correlation_4d: pair counts differ");
  const std::size_t p = support.dim(0), c = support.dim(1), hw = support.dim(2) * support.dim(3);
  const Tensor<T> s = permute(reshape(l2_normalize(support, 1), {p, c, hw}), {0, 2, 1});
  const Tensor<T> q = reshape(l2_normalize(query, 1), {p, c, hw});
  return matmul(s, q);
}

template <class T>
Tensor<T> correlation_pairs(const Tensor<T>& prototypes, const Tensor<T>& queries) {
  check_maps(prototypes, queries, "correlation_pairs");
  const std::size_t n = prototypes.dim(0), nq = queries.dim(0), c = prototypes.dim(1);
  const std::size_t hw = prototypes.dim(2) * prototypes.dim(3);
  const Tensor<T> s = reshape(permute(reshape(l2_normalize(prototypes, 1), {n, c, hw}), {0, 2, 1}), {n * hw, c});
  const Tensor<T> q = reshape(permute(reshape(l2_normalize(queries, 1), {nq, c, hw}), {1, 0, 2}), {c, nq * hw});
  const Tensor<T> a = reshape(matmul(s, q), {n, hw, nq, hw});
  return reshape(permute(a, {0, 2, 1, 3}), {n * nq, hw, hw});
}

template <class T>
Tensor<T> transpose_positions(const Tensor<T>& a) {
  if (a.rank() != 3) throw ShapeError("transpose_positions expects [P x HW x HW]");
  return permute(a, {0, 2, 1});
}

namespace {

template <class T>
Tensor<T> conv_view(const Tensor<T>& a, std::size_t h, std::size_t w, const ParameterSet<T>& params,
                    const std::string& name) {
  const std::size_t p = a.dim(0), hw = a.dim(1), hw_q = a.dim(2);
  std::optional<Tensor<T>> bias;
  if (params.contains(name + ".bias")) bias = params.get(name + ".bias");
  const Tensor<T> y = conv3d(reshape(a, {p, 1, h, w, hw_q}), params.get(name + ".weight"), bias, {1, 1, 1}, {1, 1, 1});
  return reshape(y, {p, hw, hw_q});
}

}  // namespace

template <class T>
Tensor<T> dca_refine(const Tensor<T>& a, std::size_t h, std::size_t w, const ParameterSet<T>& params) {
  if (h * w < 1) throw ShapeError("dca_refine: empty spatial grid");
  if (a.rank() != 3 || a.dim(1) != h * w || a.dim(2) != h * w) {
    throw ShapeError("dca_refine expects [P x " + std::to_string(h * w) + " x " + std::to_string(h * w) + "], got " +
                     shape_string(a.shape()));
  }
  const Tensor<T> a1 = add(conv_view(a, h, w, params, "dcm.dca.conv1"),
                           transpose_positions(conv_view(transpose_positions(a), h, w, params, "dcm.dca.conv1")));
  return add(conv_view(a1, h, w, params, "dcm.dca.conv_a"),
             transpose_positions(conv_view(transpose_positions(a1), h, w, params, "dcm.dca.conv_b")));
}

template <class T>
Tensor<T> attention_from_correlation(const Tensor<T>& refined, Side side, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("attention temperature must be positive");
  if (refined.rank() != 3) throw ShapeError("attention_from_correlation expects [P x HW x HW]");
  // Query attention averages over support positions (axis 1) and vice versa.
  const Tensor<T> logits = mean(refined, side == Side::kQuery ? 1 : 2);
  return softmax(scale(logits, T(1.0 / temperature)), 1);
}

template <class T>
Tensor<T> modulate(const Tensor<T>& features, const Tensor<T>& attention) {
  if (features.rank() != 4 || attention.rank() != 2 || attention.dim(0) != features.dim(0) ||
      attention.dim(1) != features.dim(2) * features.dim(3)) {
    throw ShapeError("modulate: features " + shape_string(features.shape()) + " and attention " +
                     shape_string(attention.shape()) + " do not match");
  }
  const std::size_t p = features.dim(0), c = features.dim(1), hw = attention.dim(1);
  return reshape(matmul(reshape(features, {p, c, hw}), reshape(attention, {p, hw, 1})), {p, c});
}

template <class T>
DcmPairs<T> dcm_forward(const Tensor<T>& prototypes, const Tensor<T>& queries, const ParameterSet<T>& params,
                        const DcmConfig& config) {
  check_maps(prototypes, queries, "dcm_forward");
  const std::size_t n = prototypes.dim(0), nq = queries.dim(0);
  const std::size_t h = prototypes.dim(2), w = prototypes.dim(3), hw = h * w;
  if (n < 2) throw ShapeError("dcm_forward needs at least two classes");

  Tensor<T> refined;
  if (config.use_dca) {
    refined = dca_refine(correlation_pairs(prototypes, queries), h, w, params);
  } else {
    refined = Tensor<T>::zeros({n * nq, hw, hw});
  }
  const Tensor<T> att_s = attention_from_correlation(refined, Side::kSupport, config.temperature);
  const Tensor<T> att_q = attention_from_correlation(refined, Side::kQuery, config.temperature);

  std::vector<std::size_t> class_of(n * nq), query_of(n * nq);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t q = 0; q < nq; ++q) {
      class_of[i * nq + q] = i;
      query_of[i * nq + q] = q;
    }
  DcmPairs<T> out;
  out.support = modulate(index_select(prototypes, class_of), att_s);
  out.query = modulate(index_select(queries, query_of), att_q);
  out.support_attention = att_s;
  out.query_attention = att_q;
  return out;
}

template <class T>
void init_dcm_params(ParameterSet<T>& params, const DcmConfig& config, std::size_t channels, Rng& rng) {
  config.validate(channels);
  const std::size_t c = channels, c2 = channels / config.qk_ratio;
  if (config.use_bcc) {
    params.add("dcm.cc.query.weight", kaiming_uniform<T>({c2, c, 1, 1}, c, rng));
    params.add("dcm.cc.query.bias", Tensor<T>::zeros({c2}));
    params.add("dcm.cc.key.weight", kaiming_uniform<T>({c2, c, 1, 1}, c, rng));
    params.add("dcm.cc.value.weight", kaiming_uniform<T>({c, c, 1, 1}, c, rng));
    params.add("dcm.cc.value.bias", Tensor<T>::zeros({c}));
  }
  if (config.use_dca) {
    for (const char* name : {"dcm.dca.conv1", "dcm.dca.conv_a", "dcm.dca.conv_b"}) {
      params.add(std::string(name) + ".weight", kaiming_uniform<T>({1, 1, 3, 3, 3}, 27, rng));
    }
    // The second stage feeds a softmax only, where a constant offset cancels.
    params.add("dcm.dca.conv1.bias", Tensor<T>::zeros({1}));
  }
}

#define FICNET_INSTANTIATE_DCM(T)                                                                          \
  template Tensor<T> criss_cross_aggregate(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template std::vector<T> criss_cross_weights(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> crisscross_step(const Tensor<T>&, const ParameterSet<T>&);                            \
  template Tensor<T> bcc(const Tensor<T>&, const Tensor<T>&, const ParameterSet<T>&, std::size_t);         \
  template Tensor<T> class_prototypes(const Tensor<T>&, const std::vector<std::size_t>&, std::size_t);     \
  template Tensor<T> correlation_4d(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> correlation_pairs(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> transpose_positions(const Tensor<T>&);                                                \
  template Tensor<T> dca_refine(const Tensor<T>&, std::size_t, std::size_t, const ParameterSet<T>&);       \
  template Tensor<T> attention_from_correlation(const Tensor<T>&, Side, double);                           \
  template Tensor<T> modulate(const Tensor<T>&, const Tensor<T>&);                                         \
  template DcmPairs<T> dcm_forward(const Tensor<T>&, const Tensor<T>&, const ParameterSet<T>&, const DcmConfig&); \
  template void init_dcm_params(ParameterSet<T>&, const DcmConfig&, std::size_t, Rng&);

FICNET_INSTANTIATE_DCM(float)
FICNET_INSTANTIATE_DCM(double)

}  // namespace ficnet
