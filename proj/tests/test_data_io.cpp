#include <cstring>
#include <fstream>

#include "doctest.h"
#include "ficnet/data_io.hpp"
#include "support.hpp"

using namespace ficnet;
namespace fs = std::filesystem;

namespace {

RgbImage solid(std::size_t w, std::size_t h, float r, float g, float b) {
  RgbImage img;
  img.width = w;
  img.height = h;
  img.planes.resize(3 * w * h);
  for (std::size_t i = 0; i < w * h; ++i) {
    img.planes[i] = r;
    img.planes[w * h + i] = g;
    img.planes[2 * w * h + i] = b;
  }
  return img;
}

void make_corpus(const fs::path& root) {
  const char* names[] = {"beta", "alpha", "gamma"};
  const Split splits[] = {Split::kTrain, Split::kVal, Split::kTest};
  std::vector<std::pair<std::string, Split>> entries;
  for (int c = 0; c < 3; ++c) {
    fs::create_directories(root / names[c]);
    // Written out of order on purpose.
    for (const char* s : {"b.ppm", "a.ppm"}) write_ppm(root / names[c] / s, solid(2, 2, float(c) / 2, 0, 1));
    write_file(root / names[c] / "notes.txt", "ignored");
    entries.emplace_back(names[c], splits[c]);
  }
  write_split_file(root / "split.txt", entries);
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return out;
}

SynthSpec tiny_spec() {
  SynthSpec s;
  s.num_classes = 8;
  s.samples_per_class = 3;
  s.side = 16;
  s.seed = 5;
  return s;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.backbone.input_side = 32;
  m.backbone.block_channels = 8;
  m.mfn.num_freq = 2;
  m.num_train_classes = 4;
  return m;
}

}  // namespace

TEST_CASE("dataset scan orders classes and samples lexicographically") {
  test::TempDir dir("scan");
  make_corpus(dir.path());
  const auto index = scan_dataset(dir.path(), dir / "split.txt");
  REQUIRE(index.classes.size() == 3);
  CHECK(index.classes[0].name == "alpha");
  CHECK(index.classes[1].name == "beta");
  CHECK(index.classes[2].name == "gamma");
  CHECK(index.classes[0].split == Split::kVal);
  CHECK(index.sample_count() == 6);
  for (const auto& c : index.classes) {
    REQUIRE(c.samples.size() == 2);
    CHECK(c.samples[0].filename() == "a.ppm");
    CHECK(c.samples[1].filename() == "b.ppm");
  }
  CHECK(index.classes_in(Split::kTest).size() == 1);

  const auto again = scan_dataset(dir.path(), dir / "split.txt");
  for (std::size_t c = 0; c < 3; ++c) CHECK(again.classes[c].samples == index.classes[c].samples);

  const auto val = load_split(index, Split::kVal, 2);
  REQUIRE(val.num_classes() == 1);
  CHECK(val.images[0].size() == 2);
  CHECK(val.images[0][0][0] == doctest::Approx(0.5f).epsilon(1e-2));
}

TEST_CASE("split files") {
  test::TempDir dir("split");
  write_file(dir / "dup.txt", "a\ttrain\n# comment\n\nb\tval\na\ttest\n");
  CHECK_THROWS_AS(read_split_file(dir / "dup.txt"), FormatError);
  write_file(dir / "bad.txt", "lonely\n");
  CHECK_THROWS_AS(read_split_file(dir / "bad.txt"), FormatError);
  write_file(dir / "tok.txt", "a\tdev\n");
  CHECK_THROWS_AS(read_split_file(dir / "tok.txt"), FormatError);
  write_file(dir / "ok.txt", "# header\na\ttrain\n\nb\ttest\n");
  const auto entries = read_split_file(dir / "ok.txt");
  REQUIRE(entries.size() == 2);
  CHECK(entries[1].first == "b");
  CHECK(entries[1].second == Split::kTest);
  CHECK_THROWS_AS(scan_dataset(dir.path(), dir / "ok.txt"), FormatError);  // no class directories
}

TEST_CASE("PPM decoding") {
  const std::string white = "P6\n2 2\n255\n" + std::string(12, '\xff');
  const auto img = decode_ppm(white);
  CHECK(img.width == 2);
  CHECK(img.height == 2);
  REQUIRE(img.planes.size() == 12);
  for (float v : img.planes) CHECK(v == 1.0f);

  CHECK_THROWS_AS(decode_ppm("P6\n2 2\n65535\n" + std::string(24, '\0')), FormatError);
  CHECK_THROWS_AS(decode_ppm("P6\n2 2\n255\n" + std::string(11, '\0')), FormatError);
  CHECK_THROWS_AS(decode_ppm("P3\n1 1\n255\n0 0 0"), FormatError);

  const auto commented = decode_ppm("P6 # a comment\n1 1\n255\n\x10\x20\x30");
  CHECK(commented.planes[1] == doctest::Approx(32.0 / 255.0));

  // Interleaved bytes become planes.
  const auto rgb = decode_ppm(std::string("P6\n2 1\n255\n") + std::string("\x00\x10\x20\x30\x40\x50", 6));
  CHECK(rgb.planes[0] == 0.0f);
  CHECK(rgb.planes[1] == doctest::Approx(0x30 / 255.0));
  CHECK(rgb.planes[2] == doctest::Approx(0x10 / 255.0));
  CHECK(encode_ppm(rgb) == std::string("P6\n2 1\n255\n") + std::string("\x00\x10\x20\x30\x40\x50", 6));
}

TEST_CASE("bilinear halving of a checkerboard averages it") {
  RgbImage board = solid(4, 4, 0, 0, 0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) board.planes[(c * 4 + y) * 4 + x] = float((x + y) % 2);
  const auto half = resize_bilinear(board, 2, 2);
  for (float v : half.planes) CHECK(v == doctest::Approx(0.5f));
  const auto same = resize_bilinear(board, 4, 4);
  CHECK(same.planes == board.planes);
}

TEST_CASE("load_image resizes PPM and accepts FICT") {
  test::TempDir dir("load");
  write_ppm(dir / "x.ppm", solid(5, 3, 0.2f, 0.4f, 0.6f));
  const auto t = load_image(dir / "x.ppm", 4);
  CHECK(t.shape() == Shape{3, 4, 4});
  CHECK(t[0] == doctest::Approx(51.0 / 255.0));
  save_tensor(dir / "y.fict", Tensor<float>::full({3, 4, 4}, 0.25f));
  CHECK(load_image(dir / "y.fict", 4)[47] == 0.25f);
  save_tensor(dir / "z.fict", Tensor<float>::full({4, 4}, 0.25f));
  CHECK_THROWS_AS(load_image(dir / "z.fict", 4), FormatError);
}

TEST_CASE("FICT round trip") {
  Rng rng(1);
  const auto t = test::random_tensor<float>(rng, {64, 5, 5});
  const std::string bytes = encode_tensor(t);
  CHECK(bytes.size() == 58 + 64 * 25 * 4);
  CHECK(bytes.substr(0, 4) == "FICT");
  CHECK(test::bit_equal(decode_tensor<float>(bytes), t));
  CHECK(encode_tensor(decode_tensor<float>(bytes)) == bytes);

  const auto scalar = Tensor<double>::scalar(-2.5);
  const auto s = decode_tensor<double>(encode_tensor(scalar));
  CHECK(s.rank() == 0);
  CHECK(s.item() == -2.5);

  // float payloads widen exactly; double payloads never narrow.
  const auto wide = decode_tensor<double>(bytes);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(wide[i] == double(t[i]));
  CHECK_THROWS_AS(decode_tensor<float>(encode_tensor(scalar)), FormatError);

  CHECK_THROWS_AS(decode_tensor<float>(bytes.substr(0, bytes.size() - 1)), FormatError);
  CHECK_THROWS_AS(decode_tensor<float>(bytes + "x"), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_tensor<float>(bad), FormatError);
  bad = bytes;
  bad[9] = 7;  // rank
  CHECK_THROWS_AS(decode_tensor<float>(bad), FormatError);

  test::TempDir dir("fict");
  save_tensor(dir / "t.fict", t);
  CHECK(read_file(dir / "t.fict") == bytes);
  CHECK(test::bit_equal(load_tensor<float>(dir / "t.fict"), t));
  CHECK_THROWS_AS(load_tensor<float>(dir / "missing.fict"), FormatError);
}

TEST_CASE("checkpoints round trip byte for byte") {
  FicNet<float> model(tiny_model(), FrequencyIndexSet::low_first(2, 5, 5), 3);
  Rng rng(2);
  model.forward(test::random_tensor<float>(rng, {4, 3, 32, 32}), {0, 0, 1, 1}, test::random_tensor<float>(rng, {2, 3, 32, 32}), 2);
  const auto ckpt = make_checkpoint(model, "channels=8\n", 3, 17);
  CHECK(ckpt.freq_text == model.frequencies().to_text());
  CHECK(ckpt.tensors.size() == model.params().size() + 2 * model.backbone().bn_states().size());

  test::TempDir dir("ckpt");
  save_checkpoint(dir / "a.ckpt", ckpt);
  const auto loaded = load_checkpoint<float>(dir / "a.ckpt");
  save_checkpoint(dir / "b.ckpt", loaded);
  CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));
  CHECK(loaded.config_text == "channels=8\n");
  CHECK(loaded.seed == 3);
  CHECK(loaded.iteration == 17);

  FicNet<float> other(tiny_model(), FrequencyIndexSet::low_first(2, 5, 5), 99);
  restore_checkpoint(other, loaded);
  CHECK(test::same_params(other.params(), model.params()));
  CHECK(other.backbone().bn_states()[1].running_var == model.backbone().bn_states()[1].running_var);

  // 32-bit checkpoints widen exactly into a 64-bit model.
  FicNet<double> wide(tiny_model(), FrequencyIndexSet::low_first(2, 5, 5), 0);
  restore_checkpoint(wide, load_checkpoint<double>(dir / "a.ckpt"));
  for (const auto& p : model.params().items()) {
    const auto& a = p.value;
    const auto& b = wide.params().get(p.name);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(double(a[i]) == b[i]);
  }

  const std::string bytes = read_file(dir / "a.ckpt");
  std::string tampered = bytes;
  const std::uint64_t huge = 1ull << 50;
  std::memcpy(tampered.data() + 8, &huge, 8);  // config length
  CHECK_THROWS_AS(decode_checkpoint<float>(tampered), FormatError);
  CHECK_THROWS_AS(decode_checkpoint<float>(bytes.substr(0, bytes.size() - 3)), FormatError);
  CHECK_THROWS_AS(decode_checkpoint<float>(bytes + "!"), FormatError);

  auto missing = ckpt;
  missing.tensors.pop_back();
  CHECK_THROWS_AS(restore_checkpoint(other, missing), FormatError);
  auto extra = ckpt;
  extra.tensors.emplace_back("stray", Tensor<float>::scalar(1));
  CHECK_THROWS_AS(restore_checkpoint(other, extra), FormatError);
}

TEST_CASE("synthetic corpus is reproducible byte for byte") {
  test::TempDir a("synth-a"), b("synth-b");
  const auto spec = tiny_spec();
  const auto index = generate_synthetic(spec, a.path());
  generate_synthetic(spec, b.path());
  CHECK(tree_bytes(a.path()) == tree_bytes(b.path()));
  CHECK(index.sample_count() == 24);
  CHECK(index.classes_in(Split::kTrain).size() == 4);
  CHECK(index.classes_in(Split::kVal).size() == 2);
  CHECK(index.classes_in(Split::kTest).size() == 2);

  const std::string manifest = read_file(a / "manifest.txt");
  CHECK(manifest.rfind("ficnet-synth v1\n", 0) == 0);
  CHECK(manifest.find("split=train:4 val:2 test:2") != std::string::npos);
  CHECK(manifest.find("intra_over_inter_l1=") != std::string::npos);

  // Files on disk are the in-memory renders.
  const auto& first = index.classes[0];
  const auto img = read_ppm(first.samples[0]);
  const auto ref = decode_ppm(encode_ppm(render_sample(spec, 0, 0)));
  CHECK(first.name == synth_class_name(0));
  CHECK(img.planes == ref.planes);

  auto other = spec;
  other.seed = 6;
  CHECK(render_sample(other, 0, 0).planes != render_sample(spec, 0, 0).planes);
}

TEST_CASE("nuisance dominates the class cue") {
  SynthSpec spec;
  const auto st = measure_synthetic(spec);
  CHECK(st.inter_l1 > 0);
  CHECK(st.inter_l1 < st.intra_l1);
  CHECK(st.nuisance_variance > st.signal_variance);
}

TEST_CASE("synthetic spec validation") {
  SynthSpec s;
  CHECK(s.resolved_val() == 5);
  CHECK(s.resolved_test() == 5);
  s.num_classes = 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SynthSpec{};
  s.side = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("raw-pixel nearest neighbour stays weak on the default corpus") {
  const SynthSpec spec;
  const auto split = test::synthetic_split(spec, 0, spec.num_classes);
  Rng rng(12);
  std::size_t correct = 0, total = 0;
  for (int e = 0; e < 100; ++e) {
    const Episode ep = sample_episode(split, 5, 5, 15, rng);
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
      const auto& qi = split.images[ep.query[q].cls][ep.query[q].sample];
      double best = INFINITY;
      std::size_t label = 0;
      for (std::size_t s = 0; s < ep.support.size(); ++s) {
        const auto& si = split.images[ep.support[s].cls][ep.support[s].sample];
        double d = 0;
        for (std::size_t i = 0; i < qi.size(); ++i) d += (double(qi[i]) - si[i]) * (double(qi[i]) - si[i]);
        if (d < best) {
          best = d;
          label = ep.support_labels[s];
        }
      }
      correct += label == ep.query_labels[q];
      ++total;
    }
  }
  const double acc = double(correct) / double(total);
  MESSAGE("raw-pixel 1-NN 5-way 5-shot accuracy: " << acc);
  CHECK(acc < 0.40);
}
