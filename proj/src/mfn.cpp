#include "ficnet/mfn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace ficnet {

void MfnConfig::validate(std::size_t channels) const {
  if (window_u % 2 == 0 || window_v % 2 == 0) throw ConfigError("MFN window extents must be odd");
  if (window_u != window_v || (window_u != 5 && window_u != 1)) {
    throw ConfigError("MFN reduction is defined for U = V = 5 (two 3x3 valid convolutions) or U = V = 1");
  }
  if (num_freq == 0 || num_freq > channels) {
    throw ConfigError("number of frequency groups must be in [1, C], got " + std::to_string(num_freq));
  }
  if (num_freq > freq_h * freq_w) throw ConfigError("more frequency groups than grid cells");
  if (channels < 2 || channels % 2 != 0) throw ConfigError("MFN needs an even channel count");
}

// ---------------------------------------------------------------------------
// FrequencyIndexSet

FrequencyIndexSet::FrequencyIndexSet(std::vector<FrequencyEntry> entries, std::size_t grid_h,
                                     std::size_t grid_w)
    : entries_(std::move(entries)), grid_h_(grid_h), grid_w_(grid_w) {
  validate();
}

void FrequencyIndexSet::validate() const {
  if (grid_h_ == 0 || grid_w_ == 0) throw ConfigError("frequency grid must be non-empty");
  for (std::size_t a = 0; a < entries_.size(); ++a) {
    const auto& e = entries_[a];
    if (e.i >= grid_h_ || e.j >= grid_w_) {
      throw ConfigError("frequency index (" + std::to_string(e.i) + "," + std::to_string(e.j) +
                        ") outside the grid");
    }
    for (std::size_t b = 0; b < a; ++b) {
      if (entries_[b].i == e.i && entries_[b].j == e.j) throw ConfigError("duplicate frequency index");
    }
    if (a > 0 && entries_[a - 1].score < e.score) throw ConfigError("frequency entries must be sorted by score");
  }
}

FrequencyIndexSet FrequencyIndexSet::from_scores(const std::vector<double>& scores, std::size_t grid_h,
                                                 std::size_t grid_w, std::size_t m) {
  if (scores.size() != grid_h * grid_w) throw ConfigError("score table does not match the grid");
  if (m == 0 || m > scores.size()) throw ConfigError("cannot select " + std::to_string(m) + " frequencies");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<FrequencyEntry> entries;
  for (std::size_t k = 0; k < m; ++k) {
    entries.push_back({order[k] / grid_w, order[k] % grid_w, scores[order[k]]});
  }
  return FrequencyIndexSet(std::move(entries), grid_h, grid_w);
}

FrequencyIndexSet FrequencyIndexSet::low_first(std::size_t m, std::size_t grid_h, std::size_t grid_w) {
  std::vector<double> scores(grid_h * grid_w);
  for (std::size_t i = 0; i < grid_h; ++i)
    for (std::size_t j = 0; j < grid_w; ++j) scores[i * grid_w + j] = -double(i + j);
  return from_scores(scores, grid_h, grid_w, m);
}

std::string FrequencyIndexSet::to_text() const {
  std::ostringstream os;
  os << "MFN-FREQ v1 M=" << entries_.size() << " grid=" << grid_h_ << "x" << grid_w_ << "\n";
  os << std::setprecision(17);
  for (std::size_t m = 0; m < entries_.size(); ++m) {
    os << m << " " << entries_[m].i << " " << entries_[m].j << " " << entries_[m].score << "\n";
  }
  return os.str();
}

FrequencyIndexSet FrequencyIndexSet::from_text(const std::string& text) {
  std::istringstream is(text);
  std::string header;
  if (!std::getline(is, header)) throw ConfigError("empty frequency-set file");
  std::size_t m = 0, gh = 0, gw = 0;
  char trailing = 0;
  if (std::sscanf(header.c_str(), "MFN-FREQ v1 M=%zu grid=%zux%zu%c", &m, &gh, &gw, &trailing) != 3) {
    throw ConfigError("bad frequency-set header: " + header);
  }
  std::vector<FrequencyEntry> entries;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t idx;
    FrequencyEntry e;
    if (!(ls >> idx >> e.i >> e.j >> e.score) || idx != entries.size()) {
      throw ConfigError("bad frequency-set line: " + line);
    }
    entries.push_back(e);
  }
  if (entries.size() != m) throw ConfigError("frequency-set header declares " + std::to_string(m) + " entries");
  return FrequencyIndexSet(std::move(entries), gh, gw);
}

void FrequencyIndexSet::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_text();
}

FrequencyIndexSet FrequencyIndexSet::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

// ---------------------------------------------------------------------------
// DCT

template <class T>
DctBasis<T>::DctBasis(std::size_t h, std::size_t w) : h_(h), w_(w), table_(h * w * h * w) {
  if (h == 0 || w == 0) throw ConfigError("DCT grid must be non-empty");
  const double pi = 3.14159265358979323846;
  auto factor = [](std::size_t k, std::size_t n) { return k == 0 ? std::sqrt(1.0 / double(n)) : std::sqrt(2.0 / double(n)); };
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double cy = std::cos(pi * double(2 * y + 1) * double(i) / double(2 * h));
          const double cx = std::cos(pi * double(2 * x + 1) * double(j) / double(2 * w));
          table_[((i * w + j) * h + y) * w + x] = static_cast<T>(factor(i, h) * factor(j, w) * cy * cx);
        }
}

template <class T>
std::vector<T> DctBasis<T>::image(std::size_t i, std::size_t j) const {
  const auto begin = table_.begin() + std::ptrdiff_t((i * w_ + j) * h_ * w_);
  return std::vector<T>(begin, begin + std::ptrdiff_t(h_ * w_));
}

ChannelGroup channel_group(std::size_t channels, std::size_t groups, std::size_t m) {
  const std::size_t base = channels / groups, extra = channels % groups;
  ChannelGroup g;
  g.count = base + (m < extra ? 1 : 0);
  g.begin = m * base + std::min(m, extra);
  return g;
}

// ---------------------------------------------------------------------------
// Forward pieces

template <class T>
Tensor<T> weighted_neighborhood(const Tensor<T>& features, std::size_t u, std::size_t v) {
  if (features.rank() != 4) throw ShapeError("weighted_neighborhood expects [B x C x H x W]");
  if (u % 2 == 0 || v % 2 == 0) throw ConfigError("neighborhood window extents must be odd");
  const std::size_t b = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);

  std::vector<T> weights(u * v);
  for (std::size_t a = 0; a < u; ++a)
    for (std::size_t k = 0; k < v; ++k) {
      const double dy = double(a) - double(u / 2), dx = double(k) - double(v / 2);
      weights[a * v + k] = static_cast<T>(1.0 / (std::sqrt(dy * dy + dx * dx) + 1.0));
    }
  const Tensor<T> offset_weight({u, v}, std::move(weights));

  const Tensor<T> neighbors = l2_normalize(mul(neighborhood_unfold(features, u, v), offset_weight), 1);
  const Tensor<T> center = reshape(l2_normalize(features, 1), {b, c, h, w, 1, 1});
  return mul(neighbors, center);
}

template <class T>
Tensor<T> dct_frequency_features(const Tensor<T>& s_hat, const DctBasis<T>& basis,
                                 const FrequencyIndexSet& freq) {
  if (s_hat.rank() != 4) throw ShapeError("dct_frequency_features expects [B x C x H x W]");
  const std::size_t b = s_hat.dim(0), c = s_hat.dim(1), h = s_hat.dim(2), w = s_hat.dim(3);
  if (h != basis.height() || w != basis.width()) {
    throw ShapeError("DCT basis is " + std::to_string(basis.height()) + "x" + std::to_string(basis.width()) +
                     " but input is " + shape_string(s_hat.shape()));
  }
  const std::size_t groups = freq.size();
  if (groups == 0 || groups > c) {
    throw ConfigError("frequency groups (" + std::to_string(groups) + ") must be in [1, C=" + std::to_string(c) + "]");
  }
  std::vector<T> filter(c * h * w);
  for (std::size_t m = 0; m < groups; ++m) {
    const auto& e = freq[m];
    if (e.i >= h || e.j >= w) throw ConfigError("frequency index outside the DCT grid");
    const auto img = basis.image(e.i, e.j);
    const ChannelGroup g = channel_group(c, groups, m);
    for (std::size_t ch = g.begin; ch < g.begin + g.count; ++ch)
      std::copy(img.begin(), img.end(), filter.begin() + std::ptrdiff_t(ch * h * w));
  }
  const Tensor<T> filters({c, h * w}, std::move(filter));
  return sum(mul(reshape(s_hat, {b, c, h * w}), filters), 2);
}

template <class T>
Tensor<T> multifreq_attention(const Tensor<T>& freq, const Tensor<T>& fc_weight, const Tensor<T>& fc_bias) {
  return sigmoid(linear(freq, fc_weight, std::optional<Tensor<T>>(fc_bias)));
}

template <class T>
Tensor<T> reduce_neighborhood(const Tensor<T>& s_weighted, const ParameterSet<T>& params) {
  if (s_weighted.rank() != 6) throw ShapeError("reduce_neighborhood expects [B x C x H x W x U x V]");
  const std::size_t b = s_weighted.dim(0), c = s_weighted.dim(1), h = s_weighted.dim(2), w = s_weighted.dim(3);
  const std::size_t u = s_weighted.dim(4), v = s_weighted.dim(5);
  if (u == 1 && v == 1) return reshape(s_weighted, {b, c, h, w});
  if (u != 5 || v != 5) {
    throw ConfigError("neighborhood " + std::to_string(u) + "x" + std::to_string(v) +
                      " is not reduced to 1x1 by two 3x3 valid convolutions");
  }
  Tensor<T> x = reshape(s_weighted, {b, c, h * w, u, v});
  x = relu(conv3d(x, params.get("mfn.reduce1.weight"), std::optional<Tensor<T>>(params.get("mfn.reduce1.bias"))));
  x = relu(conv3d(x, params.get("mfn.reduce2.weight"), std::optional<Tensor<T>>(params.get("mfn.reduce2.bias"))));
  return reshape(x, {b, c, h, w});
}

// ---------------------------------------------------------------------------
// Module

template <class T>
Mfn<T>::Mfn(MfnConfig config, std::size_t channels, FrequencyIndexSet freq)
    : config_(config), channels_(channels), freq_(std::move(freq)), basis_(config.freq_h, config.freq_w) {
  config_.validate(channels_);
  if (freq_.size() != config_.num_freq) {
    throw ConfigError("frequency set has " + std::to_string(freq_.size()) + " entries, M is " +
                      std::to_string(config_.num_freq));
  }
  if (freq_.grid_h() > config_.freq_h || freq_.grid_w() > config_.freq_w) {
    throw ConfigError("frequency set grid exceeds the DCT grid");
  }
}

template <class T>
void Mfn<T>::init_params(ParameterSet<T>& params, Rng& rng) const {
  const std::size_t c = channels_;
  params.add("mfn.fc.weight", kaiming_uniform<T>({c, c}, c, rng));
  params.add("mfn.fc.bias", Tensor<T>::zeros({c}));
  if (config_.window_u == 5) {
    params.add("mfn.reduce1.weight", kaiming_uniform<T>({c / 2, c, 1, 3, 3}, c * 9, rng));
    params.add("mfn.reduce1.bias", Tensor<T>::zeros({c / 2}));
    params.add("mfn.reduce2.weight", kaiming_uniform<T>({c, c / 2, 1, 3, 3}, c / 2 * 9, rng));
    params.add("mfn.reduce2.bias", Tensor<T>::zeros({c}));
  }
}

template <class T>
Tensor<T> Mfn<T>::weighted_input(const FeatureMap<T>& features, const ParameterSet<T>& params,
                                 Tensor<T>* attention, Tensor<T>* neighborhood) const {
  const std::size_t b = features.batch(), c = features.channels(), h = features.height(), w = features.width();
  if (c != channels_) throw ShapeError("MFN configured for " + std::to_string(channels_) + " channels");
  const std::size_t u = config_.window_u, v = config_.window_v;
  const Tensor<T> s = weighted_neighborhood(features.tensor, u, v);
  Tensor<T> s_hat = mean(reshape(s, {b, c, h, w, u * v}), 4);
  if (h != config_.freq_h || w != config_.freq_w) s_hat = adaptive_avg_pool2d(s_hat, config_.freq_h, config_.freq_w);
  const Tensor<T> freq = dct_frequency_features(s_hat, basis_, freq_);
  const Tensor<T> d = multifreq_attention(freq, params.get("mfn.fc.weight"), params.get("mfn.fc.bias"));
  if (attention) *attention = d;
  if (neighborhood) *neighborhood = s;
  return mul(s, reshape(d, {b, c, 1, 1, 1, 1}));
}

template <class T>
MfnOutput<T> Mfn<T>::forward(const FeatureMap<T>& features, const ParameterSet<T>& params) const {
  Tensor<T> d, s;
  const Tensor<T> weighted = weighted_input(features, params, &d, &s);
  FeatureMap<T> reduced(reduce_neighborhood(weighted, params), Stage::kMultiFreq);
  FeatureMap<T> fused(add(features.tensor, reduced.tensor), Stage::kMultiFreq);
  return MfnOutput<T>{std::move(reduced), std::move(fused), std::move(d), std::move(s)};
}

template class DctBasis<float>;
template class DctBasis<double>;
template class Mfn<float>;
template class Mfn<double>;

#define FICNET_INSTANTIATE_MFN(T)                                                                      \
  template Tensor<T> weighted_neighborhood(const Tensor<T>&, std::size_t, std::size_t);                \
  template Tensor<T> dct_frequency_features(const Tensor<T>&, const DctBasis<T>&, const FrequencyIndexSet&); \
  template Tensor<T> multifreq_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> reduce_neighborhood(const Tensor<T>&, const ParameterSet<T>&);

FICNET_INSTANTIATE_MFN(float)
FICNET_INSTANTIATE_MFN(double)

}  // namespace ficnet
