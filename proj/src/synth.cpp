// Procedural birds: class identity lives only in the beak angle relative to the
// body and the number of wing stripes; pose, scale, colors and background vary
// per image.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "ficnet/data_io.hpp"

namespace fs = std::filesystem;

namespace ficnet {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr std::size_t kSupersample = 3;
constexpr double kPixelNoise = 0.02;

using Rgb = std::array<double, 3>;

Rgb random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

struct Background {
  std::size_t kind = 0;
  Rgb a{}, b{};
  double angle = 0, period = 1, phase = 0, cell = 0.3, offset_x = 0, offset_y = 0;
  struct Blob {
    double x, y, r;
    Rgb color;
  };
  std::vector<Blob> blobs;

  Background(std::size_t texture, std::uint64_t seed) : kind(texture) {
    Rng rng(seed);
    a = random_color(rng);
    b = random_color(rng);
    angle = rng.uniform(0, 2 * kPi);
    period = rng.uniform(0.2, 0.5);
    phase = rng.uniform(0, 2 * kPi);
    cell = rng.uniform(0.15, 0.4);
    offset_x = rng.uniform(0, 1);
    offset_y = rng.uniform(0, 1);
    for (int i = 0; i < 5; ++i) blobs.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.2, 0.5), random_color(rng)});
  }

  Rgb at(double u, double v) const {
    switch (kind % 4) {
      case 0: {  // linear gradient
        const double t = 0.5 + 0.35 * (u * std::cos(angle) + v * std::sin(angle));
        return mix(a, b, std::clamp(t, 0.0, 1.0));
      }
      case 1: {  // checkerboard
        const long cx = long(std::floor(u / cell + offset_x)), cy = long(std::floor(v / cell + offset_y));
        return ((cx + cy) & 1) ? a : b;
      }
      case 2: {  // soft stripes
        const double s = u * std::cos(angle) + v * std::sin(angle);
        return mix(a, b, 0.5 + 0.5 * std::sin(2 * kPi * s / period + phase));
      }
      default: {  // blobs over a flat color
        Rgb c = a;
        for (const auto& blob : blobs) {
          const double d2 = ((u - blob.x) * (u - blob.x) + (v - blob.y) * (v - blob.y)) / (blob.r * blob.r);
          c = mix(c, blob.color, std::exp(-d2));
        }
        return c;
      }
    }
  }
};

bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

bool in_triangle(double x, double y, const double (&p)[3][2]) {
  auto edge = [&](int i, int j) { return (p[j][0] - p[i][0]) * (y - p[i][1]) - (p[j][1] - p[i][1]) * (x - p[i][0]); };
  const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
  return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
}

// Bird geometry in body coordinates; the image spans [-1, 1] with y pointing down.
struct Geometry {
  static constexpr double body_cx = -0.05, body_cy = 0.05, body_rx = 0.52, body_ry = 0.32;
  static constexpr double wing_cx = -0.12, wing_cy = 0.04, wing_rx = 0.42, wing_ry = 0.2;
  static constexpr double head_cx = 0.45, head_cy = -0.2, head_r = 0.18;
  static constexpr double stripe_half = 0.06;
  static constexpr double beak_len = 0.6, beak_base = 0.1, beak_half = 0.1;
};

}  // namespace

void SynthSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synthetic corpus needs at least two classes");
  if (samples_per_class == 0) throw ConfigError("samples per class must be positive");
  if (side < 8) throw ConfigError("synthetic image side must be at least 8");
  if (beak_bins == 0 || max_stripes == 0) throw ConfigError("class parameter bins must be non-empty");
  if (num_classes > beak_bins * max_stripes) {
    throw ConfigError(std::to_string(num_classes) + " classes need more than the " +
                      std::to_string(beak_bins * max_stripes) + " distinct (beak bin, stripe count) cells; bins would overlap");
  }
  if (!(max_beak_deg >= 0) || !(max_rotation_deg >= 0) || !(max_shift >= 0)) {
    throw ConfigError("nuisance ranges must be non-negative");
  }
  if (!(min_scale > 0) || !(max_scale >= min_scale)) throw ConfigError("scale range is invalid");
  if (num_backgrounds == 0) throw ConfigError("at least one background texture is required");
  if (resolved_val() + resolved_test() >= num_classes) throw ConfigError("no classes left for training");
}

std::size_t SynthSpec::resolved_val() const { return val_classes ? val_classes : num_classes / 4; }
std::size_t SynthSpec::resolved_test() const { return test_classes ? test_classes : num_classes / 4; }

BirdClass synth_class(const SynthSpec& spec, std::size_t cls) {
  BirdClass bird;
  const std::size_t bin = cls % spec.beak_bins;
  bird.stripes = cls / spec.beak_bins + 1;
  bird.beak_deg = spec.beak_bins == 1 ? 0.0
                                      : -spec.max_beak_deg + 2.0 * spec.max_beak_deg * double(bin) / double(spec.beak_bins - 1);
  return bird;
}

std::string synth_class_name(std::size_t cls) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "bird_%02zu", cls);
  return buf;
}

Nuisance draw_nuisance(const SynthSpec& spec, Rng& rng) {
  Nuisance n;
  n.shift_x = rng.uniform(-spec.max_shift, spec.max_shift);
  n.shift_y = rng.uniform(-spec.max_shift, spec.max_shift);
  n.rotation_deg = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg);
  n.scale = rng.uniform(spec.min_scale, spec.max_scale);
  n.background = std::size_t(rng.below(spec.num_backgrounds));
  n.texture_seed = rng.next_u64();
  for (double& c : n.body_rgb) c = rng.uniform(0.15, 0.95);
  return n;
}

RgbImage render_bird(const SynthSpec& spec, const BirdClass& bird, const Nuisance& nuisance) {
  using G = Geometry;
  const std::size_t s = spec.side;
  const Background background(nuisance.background, nuisance.texture_seed);
  const Rgb body{nuisance.body_rgb[0], nuisance.body_rgb[1], nuisance.body_rgb[2]};
  const Rgb wing = mix(body, Rgb{0, 0, 0}, 0.4);
  const double wing_luma = 0.3 * wing[0] + 0.59 * wing[1] + 0.11 * wing[2];
  const Rgb stripe = wing_luma > 0.35 ? Rgb{0.05, 0.05, 0.05} : Rgb{0.95, 0.95, 0.9};
  const Rgb beak{0.95, 0.6, 0.1};
  const Rgb eye{0.02, 0.02, 0.02};

  const double rot = nuisance.rotation_deg * kPi / 180.0;
  const double cr = std::cos(rot), sr = std::sin(rot);
  const double theta = bird.beak_deg * kPi / 180.0;
  const double dx = std::cos(theta), dy = std::sin(theta);
  const double beak_tri[3][2] = {
      {G::head_cx + G::beak_len * dx, G::head_cy + G::beak_len * dy},
      {G::head_cx + G::beak_base * dx - G::beak_half * dy, G::head_cy + G::beak_base * dy + G::beak_half * dx},
      {G::head_cx + G::beak_base * dx + G::beak_half * dy, G::head_cy + G::beak_base * dy - G::beak_half * dx}};
  const double tail_tri[3][2] = {{-0.5, 0.0}, {-0.85, -0.18}, {-0.85, 0.18}};

  auto shade = [&](double u, double v) -> Rgb {
    // Image point -> body coordinates: undo translation, rotation, scale.
    const double tx = (u - nuisance.shift_x) / nuisance.scale, ty = (v - nuisance.shift_y) / nuisance.scale;
    const double x = cr * tx + sr * ty, y = -sr * tx + cr * ty;
    if (in_ellipse(x, y, G::head_cx + 0.06, G::head_cy - 0.05, 0.04, 0.04)) return eye;
    if (in_triangle(x, y, beak_tri)) return beak;
    if (in_ellipse(x, y, G::head_cx, G::head_cy, G::head_r, G::head_r)) return body;
    if (in_ellipse(x, y, G::wing_cx, G::wing_cy, G::wing_rx, G::wing_ry)) {
      for (std::size_t k = 1; k <= bird.stripes; ++k) {
        const double sx = G::wing_cx - G::wing_rx + 2.0 * G::wing_rx * double(k) / double(bird.stripes + 1);
        if (std::abs(x - sx) <= G::stripe_half) return stripe;
      }
      return wing;
    }
    if (in_ellipse(x, y, G::body_cx, G::body_cy, G::body_rx, G::body_ry)) return body;
    if (in_triangle(x, y, tail_tri)) return wing;
    return background.at(u, v);
  };

  RgbImage img;
  img.width = img.height = s;
  img.planes.assign(3 * s * s, 0.0f);
  Rng noise(nuisance.texture_seed ^ 0x6e6f697365ull);
  const double inv = 1.0 / double(kSupersample * kSupersample);
  for (std::size_t py = 0; py < s; ++py) {
    for (std::size_t px = 0; px < s; ++px) {
      Rgb acc{0, 0, 0};
      for (std::size_t sy = 0; sy < kSupersample; ++sy)
        for (std::size_t sx = 0; sx < kSupersample; ++sx) {
          const double u = (double(px) + (double(sx) + 0.5) / kSupersample) / double(s) * 2.0 - 1.0;
          const double v = (double(py) + (double(sy) + 0.5) / kSupersample) / double(s) * 2.0 - 1.0;
          const Rgb c = shade(u, v);
          for (int ch = 0; ch < 3; ++ch) acc[std::size_t(ch)] += c[std::size_t(ch)] * inv;
        }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double value = acc[ch] + kPixelNoise * noise.normal();
        img.planes[(ch * s + py) * s + px] = float(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return img;
}

RgbImage render_sample(const SynthSpec& spec, std::size_t cls, std::size_t sample) {
  Rng rng(derive_seed(spec.seed, std::uint64_t(cls) * 1000003ull + sample));
  return render_bird(spec, synth_class(spec, cls), draw_nuisance(spec, rng));
}

namespace {

double mean_l1(const RgbImage& a, const RgbImage& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.planes.size(); ++i) d += std::abs(double(a.planes[i]) - double(b.planes[i]));
  return d / double(a.planes.size());
}

}  // namespace

SynthStats measure_synthetic(const SynthSpec& spec, std::size_t pairs) {
  spec.validate();
  SynthStats st;
  Rng rng(derive_seed(spec.seed, 0x6d656173ull));
  // Classes whose next beak bin exists with the same stripe count.
  std::vector<std::size_t> neighbors;
  for (std::size_t c = 0; c + 1 < spec.num_classes; ++c)
    if (c % spec.beak_bins + 1 < spec.beak_bins) neighbors.push_back(c);
  std::size_t inter_count = 0;
  for (std::size_t k = 0; k < pairs; ++k) {
    const std::size_t cls = std::size_t(rng.below(spec.num_classes));
    const Nuisance shared = draw_nuisance(spec, rng);
    const Nuisance other = draw_nuisance(spec, rng);
    st.intra_l1 += mean_l1(render_bird(spec, synth_class(spec, cls), shared),
                           render_bird(spec, synth_class(spec, cls), other));
    if (!neighbors.empty()) {
      const std::size_t a = neighbors[rng.below(neighbors.size())];
      st.inter_l1 += mean_l1(render_bird(spec, synth_class(spec, a), shared),
                             render_bird(spec, synth_class(spec, a + 1), shared));
      ++inter_count;
    }
  }
  st.inter_l1 = inter_count ? st.inter_l1 / double(inter_count) : 0.0;
  st.intra_l1 /= double(std::max<std::size_t>(pairs, 1));

  // Per-pixel variance decomposition over the actual corpus images.
  const std::size_t per_class = std::min<std::size_t>(spec.samples_per_class, 16);
  const std::size_t n = 3 * spec.side * spec.side;
  std::vector<std::vector<double>> means(spec.num_classes, std::vector<double>(n, 0.0));
  double within = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    std::vector<double> sq(n, 0.0);
    for (std::size_t s = 0; s < per_class; ++s) {
      const RgbImage img = render_sample(spec, c, s);
      for (std::size_t i = 0; i < n; ++i) {
        means[c][i] += img.planes[i];
        sq[i] += double(img.planes[i]) * img.planes[i];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      means[c][i] /= double(per_class);
      within += sq[i] / double(per_class) - means[c][i] * means[c][i];
    }
  }
  st.nuisance_variance = within / double(n * spec.num_classes);
  double between = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0, m2 = 0;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      m += means[c][i];
      m2 += means[c][i] * means[c][i];
    }
    m /= double(spec.num_classes);
    between += m2 / double(spec.num_classes) - m * m;
  }
  st.signal_variance = between / double(n);
  return st;
}

DatasetIndex generate_synthetic(const SynthSpec& spec, const fs::path& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  for (std::size_t c = 0; c < spec.num_classes; ++c) fs::create_directories(out_dir / synth_class_name(c));

  const std::size_t total = spec.num_classes * spec.samples_per_class;
  std::string failure;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t f = 0; f < std::ptrdiff_t(total); ++f) {
    const std::size_t c = std::size_t(f) / spec.samples_per_class, s = std::size_t(f) % spec.samples_per_class;
    char name[32];
    std::snprintf(name, sizeof name, "%03zu.ppm", s);
    try {
      write_ppm(out_dir / synth_class_name(c) / name, render_sample(spec, c, s));
    } catch (const std::exception& e) {
#pragma omp critical(ficnet_synth_failure)
      if (failure.empty()) failure = e.what();
    }
  }
  if (!failure.empty()) throw FormatError(failure);

  // Class-disjoint split from a seeded permutation.
  Rng rng(derive_seed(spec.seed, 0x73706c6974ull));
  const auto order = rng.choose(spec.num_classes, spec.num_classes);
  const std::size_t n_val = spec.resolved_val(), n_test = spec.resolved_test();
  const std::size_t n_train = spec.num_classes - n_val - n_test;
  std::vector<std::pair<std::string, Split>> entries;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    const Split split = k < n_train ? Split::kTrain : k < n_train + n_val ? Split::kVal : Split::kTest;
    entries.emplace_back(synth_class_name(order[k]), split);
  }
  std::sort(entries.begin(), entries.end());
  write_split_file(out_dir / "split.txt", entries);

  const SynthStats st = measure_synthetic(spec);
  std::ostringstream m;
  m << "ficnet-synth v1\n"
    << "num_classes=" << spec.num_classes << "\n"
    << "samples_per_class=" << spec.samples_per_class << "\n"
    << "side=" << spec.side << "\n"
    << "seed=" << spec.seed << "\n"
    << "beak_bins=" << spec.beak_bins << "\n"
    << "max_beak_deg=" << spec.max_beak_deg << "\n"
    << "max_stripes=" << spec.max_stripes << "\n"
    << "max_shift=" << spec.max_shift << "\n"
    << "max_rotation_deg=" << spec.max_rotation_deg << "\n"
    << "scale=" << spec.min_scale << ".." << spec.max_scale << "\n"
    << "backgrounds=" << spec.num_backgrounds << "\n"
    << "split=train:" << n_train << " val:" << n_val << " test:" << n_test << "\n"
    << "inter_l1=" << st.inter_l1 << "\n"
    << "intra_l1=" << st.intra_l1 << "\n"
    << "intra_over_inter_l1=" << (st.inter_l1 > 0 ? st.intra_l1 / st.inter_l1 : 0.0) << "\n"
    << "signal_variance=" << st.signal_variance << "\n"
    << "nuisance_variance=" << st.nuisance_variance << "\n"
    << "nuisance_over_signal_variance="
    << (st.signal_variance > 0 ? st.nuisance_variance / st.signal_variance : 0.0) << "\n";
  write_file(out_dir / "manifest.txt", m.str());
  return scan_dataset(out_dir, out_dir / "split.txt");
}

}  // namespace ficnet
