#include "ficnet/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace ficnet {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

Split parse_split(const std::string& token) {
  if (token == "train") return Split::kTrain;
  if (token == "val") return Split::kVal;
  if (token == "test") return Split::kTest;
  throw FormatError("unknown split token '" + token + "'");
}

const char* split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// Dataset index

std::size_t DatasetIndex::sample_count() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += c.samples.size();
  return n;
}

std::vector<const DatasetIndex::ClassEntry*> DatasetIndex::classes_in(Split split) const {
  std::vector<const ClassEntry*> out;
  for (const auto& c : classes)
    if (c.split == split) out.push_back(&c);
  return out;
}

std::vector<std::pair<std::string, Split>> read_split_file(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::pair<std::string, Split>> entries;
  std::map<std::string, Split> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name, token, extra;
    if (!(ls >> name >> token) || (ls >> extra)) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected '<class>\\t<split>'");
    }
    const Split split = parse_split(token);
    auto [it, inserted] = seen.emplace(name, split);
    if (!inserted) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": class '" + name + "' listed as both " +
                        split_name(it->second) + " and " + split_name(split));
    }
    entries.emplace_back(name, split);
  }
  return entries;
}

void write_split_file(const fs::path& path, const std::vector<std::pair<std::string, Split>>& entries) {
  std::string text;
  for (const auto& [name, split] : entries) text += name + "\t" + split_name(split) + "\n";
  write_file(path, text);
}

namespace {

bool is_sample_file(const fs::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".ppm" || ext == ".fict";
}

void check_sample_header(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  char magic[4] = {};
  if (!in || !in.read(magic, 4)) throw FormatError("unreadable sample " + p.string());
  const bool ppm = magic[0] == 'P' && magic[1] == '6';
  const bool fict = std::memcmp(magic, "FICT", 4) == 0;
  if (!ppm && !fict) throw FormatError("sample " + p.string() + " is neither binary PPM nor FICT");
}

}  // namespace

DatasetIndex scan_dataset(const fs::path& root, const fs::path& split_file) {
  if (!fs::is_directory(root)) throw FormatError("dataset root " + root.string() + " is not a directory");
  DatasetIndex index;
  index.root = root;
  for (const auto& [name, split] : read_split_file(split_file)) {
    const fs::path dir = root / name;
    if (!fs::is_directory(dir)) throw FormatError("class directory " + dir.string() + " is missing");
    DatasetIndex::ClassEntry entry;
    entry.name = name;
    entry.split = split;
    for (const auto& f : fs::directory_iterator(dir)) {
      if (f.is_regular_file() && is_sample_file(f.path())) entry.samples.push_back(f.path());
    }
    std::sort(entry.samples.begin(), entry.samples.end());
    for (const auto& s : entry.samples) check_sample_header(s);
    index.classes.push_back(std::move(entry));
  }
  std::sort(index.classes.begin(), index.classes.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  return index;
}

// ---------------------------------------------------------------------------
// PPM

RgbImage decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + std::size_t(bytes[pos++] - '0');
      if (++digits > 9) throw FormatError(std::string("PPM ") + what + " too large");
    }
    if (digits == 0) throw FormatError(std::string("PPM header: missing ") + what);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("not a binary PPM (P6) file");
  pos = 2;
  RgbImage img;
  img.width = number("width");
  img.height = number("height");
  const std::size_t maxval = number("maxval");
  if (maxval != 255) throw FormatError("PPM maxval " + std::to_string(maxval) + " unsupported (only 255)");
  if (img.width == 0 || img.height == 0) throw FormatError("PPM has an empty image");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError("PPM header not terminated by whitespace");
  }
  ++pos;
  const std::size_t n = img.width * img.height;
  if (bytes.size() - pos < 3 * n) {
    throw FormatError("PPM payload truncated: " + std::to_string(bytes.size() - pos) + " of " + std::to_string(3 * n) +
                      " bytes");
  }
  img.planes.resize(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      img.planes[c * n + i] = float(static_cast<unsigned char>(bytes[pos + 3 * i + c])) / 255.0f;
  return img;
}

RgbImage read_ppm(const fs::path& path) {
  try {
    return decode_ppm(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string encode_ppm(const RgbImage& image) {
  const std::size_t n = image.width * image.height;
  if (image.planes.size() != 3 * n) throw FormatError("image plane size mismatch");
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + 3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(image.planes[c * n + i], 0.0f, 1.0f);
      out[header + 3 * i + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
    }
  return out;
}

void write_ppm(const fs::path& path, const RgbImage& image) { write_file(path, encode_ppm(image)); }

RgbImage resize_bilinear(const RgbImage& image, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw FormatError("resize to an empty image");
  if (width == image.width && height == image.height) return image;
  RgbImage out;
  out.width = width;
  out.height = height;
  out.planes.resize(3 * width * height);
  auto source = [](std::size_t dst, std::size_t in, std::size_t outn, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (double(dst) + 0.5) * double(in) / double(outn) - 0.5;
    s = std::clamp(s, 0.0, double(in - 1));
    i0 = std::size_t(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    f = s - double(i0);
  };
  const std::size_t n_in = image.width * image.height;
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double fy;
    source(y, image.height, height, y0, y1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double fx;
      source(x, image.width, width, x0, x1, fx);
      for (std::size_t c = 0; c < 3; ++c) {
        const float* p = image.planes.data() + c * n_in;
        const double top = (1 - fx) * p[y0 * image.width + x0] + fx * p[y0 * image.width + x1];
        const double bottom = (1 - fx) * p[y1 * image.width + x0] + fx * p[y1 * image.width + x1];
        out.planes[(c * height + y) * width + x] = float((1 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

Tensor<float> load_image(const fs::path& path, std::size_t side) {
  RgbImage img;
  if (path.extension() == ".fict") {
    const Tensor<float> t = load_tensor<float>(path);
    if (t.rank() != 3 || t.dim(0) != 3) throw FormatError(path.string() + ": image tensor must be [3 x H x W]");
    img.height = t.dim(1);
    img.width = t.dim(2);
    img.planes = t.values();
  } else {
    img = read_ppm(path);
  }
  img = resize_bilinear(img, side, side);
  return Tensor<float>({3, side, side}, std::move(img.planes));
}

ImageSplit load_split(const DatasetIndex& index, Split split, std::size_t side) {
  ImageSplit out;
  out.side = side;
  std::size_t position = 0;
  for (const auto* entry : index.classes_in(split)) {
    out.add_class(entry->name, position++);
    for (const auto& s : entry->samples) out.images.back().push_back(load_image(s, side).values());
  }
  return out;
}

// ---------------------------------------------------------------------------
// FICT

namespace {

constexpr std::uint32_t kFictVersion = 1;
constexpr std::size_t kFictHeader = 4 + 4 + 1 + 1 + 6 * 8;

template <class V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

class Reader {
 public:
  Reader(const std::string& bytes, const char* what) : bytes_(bytes), what_(what) {}
  template <class V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string(what_) + ": unexpected end of data");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
  const char* what_;
};

template <class T>
constexpr std::uint8_t dtype_code() {
  return sizeof(T) == 4 ? 1 : 2;
}

}  // namespace

template <class T>
std::string encode_tensor(const Tensor<T>& t) {
  std::string out = "FICT";
  put<std::uint32_t>(out, kFictVersion);
  put<std::uint8_t>(out, dtype_code<T>());
  put<std::uint8_t>(out, std::uint8_t(t.rank()));
  for (std::size_t d = 0; d < kMaxRank; ++d) put<std::uint64_t>(out, d < t.rank() ? t.dim(d) : 0);
  const auto& v = t.values();
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
  return out;
}

template <class T>
Tensor<T> decode_tensor(const std::string& bytes) {
  Reader r(bytes, "FICT");
  if (r.take(4) != "FICT") throw FormatError("FICT: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kFictVersion) throw FormatError("FICT: unsupported version " + std::to_string(version));
  const auto dtype = r.get<std::uint8_t>();
  const auto rank = r.get<std::uint8_t>();
  if (dtype != 1 && dtype != 2) throw FormatError("FICT: unknown dtype " + std::to_string(dtype));
  if (rank > kMaxRank) throw FormatError("FICT: rank " + std::to_string(rank) + " exceeds 6");
  Shape shape;
  std::size_t count = 1;
  for (std::size_t d = 0; d < kMaxRank; ++d) {
    const auto dim = r.get<std::uint64_t>();
    if (d < rank) {
      if (dim != 0 && count > (std::uint64_t(1) << 40) / dim) throw FormatError("FICT: dimension overflow");
      count *= std::size_t(dim);
      shape.push_back(std::size_t(dim));
    } else if (dim != 0) {
      throw FormatError("FICT: unused dimension slot is not zero");
    }
  }
  const std::size_t width = dtype == 1 ? 4 : 8;
  if (r.remaining() != count * width) {
    throw FormatError("FICT: payload has " + std::to_string(r.remaining()) + " bytes, header declares " +
                      std::to_string(count * width));
  }
  const std::string payload = r.take(count * width);
  std::vector<T> values(count);
  if (dtype == 1) {
    for (std::size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, payload.data() + 4 * i, 4);
      values[i] = static_cast<T>(f);
    }
  } else {
    if constexpr (sizeof(T) == 4) {
      throw FormatError("FICT: refusing to narrow a real64 tensor to real32");
    } else {
      std::memcpy(values.data(), payload.data(), count * 8);
    }
  }
  try {
    return Tensor<T>(std::move(shape), std::move(values));
  } catch (const NumericError& e) {
    throw FormatError(std::string("FICT: ") + e.what());
  }
}

template <class T>
void save_tensor(const fs::path& path, const Tensor<T>& t) {
  write_file(path, encode_tensor(t));
}

template <class T>
Tensor<T> load_tensor(const fs::path& path) {
  try {
    return decode_tensor<T>(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: "FICK" | u32 version | config | frequencies | u64 seed | u64 iteration |
// u64 count | (name, FICT blob)*, strings and blobs prefixed by a u64 length.

template <class T>
std::string encode_checkpoint(const Checkpoint<T>& ckpt) {
  std::string out = "FICK";
  put<std::uint32_t>(out, Checkpoint<T>::kVersion);
  auto put_blob = [&out](const std::string& s) {
    put<std::uint64_t>(out, s.size());
    out += s;
  };
  put_blob(ckpt.config_text);
  put_blob(ckpt.freq_text);
  put<std::uint64_t>(out, ckpt.seed);
  put<std::uint64_t>(out, ckpt.iteration);
  put<std::uint64_t>(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    put_blob(name);
    put_blob(encode_tensor(t));
  }
  return out;
}

template <class T>
Checkpoint<T> decode_checkpoint(const std::string& bytes) {
  Reader r(bytes, "checkpoint");
  if (r.take(4) != "FICK") throw FormatError("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint<T>::kVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  auto blob = [&r] {
    const auto n = r.get<std::uint64_t>();
    if (n > r.remaining()) throw FormatError("checkpoint: length field exceeds the file");
    return r.take(std::size_t(n));
  };
  Checkpoint<T> ckpt;
  ckpt.config_text = blob();
  ckpt.freq_text = blob();
  ckpt.seed = r.get<std::uint64_t>();
  ckpt.iteration = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = blob();
    ckpt.tensors.emplace_back(std::move(name), decode_tensor<T>(blob()));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes after the last tensor");
  return ckpt;
}

template <class T>
void save_checkpoint(const fs::path& path, const Checkpoint<T>& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

template <class T>
Checkpoint<T> load_checkpoint(const fs::path& path) {
  try {
    return decode_checkpoint<T>(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

namespace {

std::string bn_name(std::size_t block, const char* leaf) {
  return "backbone.block" + std::to_string(block) + ".bn." + leaf;
}

}  // namespace

template <class T>
Checkpoint<T> make_checkpoint(const FicNet<T>& model, std::string config_text, std::uint64_t seed,
                              std::uint64_t iteration) {
  Checkpoint<T> ckpt;
  ckpt.config_text = std::move(config_text);
  ckpt.freq_text = model.config().use_mfn ? model.frequencies().to_text() : "";
  ckpt.seed = seed;
  ckpt.iteration = iteration;
  for (const auto& p : model.params().items()) ckpt.tensors.emplace_back(p.name, p.value.detached());
  const auto& bn = model.backbone().bn_states();
  for (std::size_t b = 0; b < bn.size(); ++b) {
    const std::size_t c = bn[b].running_mean.size();
    ckpt.tensors.emplace_back(bn_name(b, "running_mean"), Tensor<T>({c}, bn[b].running_mean));
    ckpt.tensors.emplace_back(bn_name(b, "running_var"), Tensor<T>({c}, bn[b].running_var));
  }
  return ckpt;
}

template <class T, class U>
void restore_checkpoint(FicNet<T>& model, const Checkpoint<U>& ckpt) {
  std::map<std::string, const Tensor<U>*> table;
  for (const auto& [name, t] : ckpt.tensors) {
    if (!table.emplace(name, &t).second) throw FormatError("checkpoint: duplicate tensor " + name);
  }
  auto take = [&table](const std::string& name) {
    auto it = table.find(name);
    if (it == table.end()) throw FormatError("checkpoint lacks tensor " + name);
    const Tensor<T> value = it->second->template cast<T>();
    table.erase(it);
    return value;
  };
  auto& params = model.params();
  std::vector<std::string> names;
  for (const auto& p : params.items()) names.push_back(p.name);
  for (const auto& name : names) params.assign(name, take(name));
  auto& bn = model.backbone().bn_states();
  for (std::size_t b = 0; b < bn.size(); ++b) {
    const Tensor<T> mean = take(bn_name(b, "running_mean"));
    const Tensor<T> var = take(bn_name(b, "running_var"));
    if (mean.size() != bn[b].running_mean.size() || var.size() != bn[b].running_var.size()) {
      throw FormatError("checkpoint: batch-norm buffer size mismatch in block " + std::to_string(b));
    }
    bn[b].running_mean = mean.values();
    bn[b].running_var = var.values();
  }
  if (!table.empty()) throw FormatError("checkpoint holds tensor " + table.begin()->first + " unknown to the model");
}

#define FICNET_INSTANTIATE_IO(T)                                                        \
  template std::string encode_tensor(const Tensor<T>&);                                 \
  template Tensor<T> decode_tensor<T>(const std::string&);                              \
  template void save_tensor(const fs::path&, const Tensor<T>&);                         \
  template Tensor<T> load_tensor<T>(const fs::path&);                                   \
  template std::string encode_checkpoint(const Checkpoint<T>&);                         \
  template Checkpoint<T> decode_checkpoint<T>(const std::string&);                      \
  template void save_checkpoint(const fs::path&, const Checkpoint<T>&);                 \
  template Checkpoint<T> load_checkpoint<T>(const fs::path&);                           \
  template Checkpoint<T> make_checkpoint(const FicNet<T>&, std::string, std::uint64_t, std::uint64_t);

FICNET_INSTANTIATE_IO(float)
FICNET_INSTANTIATE_IO(double)
template void restore_checkpoint(FicNet<float>&, const Checkpoint<float>&);
template void restore_checkpoint(FicNet<double>&, const Checkpoint<double>&);
template void restore_checkpoint(FicNet<double>&, const Checkpoint<float>&);

}  // namespace ficnet
