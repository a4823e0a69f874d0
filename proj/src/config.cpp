#include "ficnet/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>


namespace ficnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(out)) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::string fmt_real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FIELD_STR(name) \
  Field{#name, [](RunConfig& c, const std::string& v) { c.name = v; }, [](const RunConfig& c) { return c.name; }}
#define FIELD_SIZE(name)                                                                      \
  Field{#name, [](RunConfig& c, const std::string& v) { c.name = parse_size(#name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.name); }}
#define FIELD_REAL(name)                                                                      \
  Field{#name, [](RunConfig& c, const std::string& v) { c.name = parse_real(#name, v); }, \
        [](const RunConfig& c) { return fmt_real(c.name); }}
#define FIELD_BOOL(name)                                                                      \
  Field{#name, [](RunConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }, \
        [](const RunConfig& c) { return std::string(c.name ? "true" : "false"); }}
#define FIELD_METRIC(name)                                                                  \
  Field{#name, [](RunConfig& c, const std::string& v) { c.name = parse_metric(v); }, \
        [](const RunConfig& c) { return std::string(metric_name(c.name)); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      FIELD_STR(data_dir),
      FIELD_STR(split_file),
      FIELD_STR(freq_file),
      FIELD_STR(out_dir),
      FIELD_SIZE(side),
      FIELD_SIZE(channels),
      FIELD_SIZE(blocks),
      FIELD_SIZE(num_freq),
      FIELD_SIZE(window),
      FIELD_SIZE(loops),
      FIELD_SIZE(qk_ratio),
      FIELD_REAL(temperature),
      FIELD_BOOL(use_mfn),
      FIELD_BOOL(use_bcc),
      FIELD_BOOL(use_dca),
      FIELD_BOOL(aux_loss),
      FIELD_SIZE(way),
      FIELD_SIZE(shot),
      FIELD_SIZE(queries),
      FIELD_REAL(mu),
      FIELD_REAL(contrast_t),
      FIELD_REAL(alpha),
      FIELD_SIZE(meta_batch),
      FIELD_SIZE(iterations),
      FIELD_BOOL(halve_on_plateau),
      FIELD_SIZE(val_every),
      FIELD_SIZE(val_episodes),
      FIELD_METRIC(metric),
      FIELD_METRIC(contrast_metric),
      FIELD_SIZE(episodes),
      FIELD_SIZE(jobs),
      Field{"precision",
            [](RunConfig& c, const std::string& v) {
              c.precision = parse_size("precision", v);
              if (c.precision != 32 && c.precision != 64) throw ConfigError("precision must be 32 or 64");
            },
            [](const RunConfig& c) { return std::to_string(c.precision); }},
      Field{"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
            [](const RunConfig& c) { return std::to_string(c.seed); }},
  };
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

void RunConfig::merge_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::merge_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str());
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.emplace_back(f.key);
  return k;
}

ModelConfig RunConfig::model_config(std::size_t num_train_classes) const {
  ModelConfig m;
  m.backbone.block_channels = channels;
  m.backbone.num_blocks = blocks;
  m.backbone.input_side = side;
  m.mfn.window_u = m.mfn.window_v = window;
  m.mfn.num_freq = num_freq;
  m.dcm.loops = loops;
  m.dcm.qk_ratio = qk_ratio;
  m.dcm.temperature = temperature;
  m.dcm.use_bcc = use_bcc;
  m.dcm.use_dca = use_dca;
  m.use_mfn = use_mfn;
  m.num_train_classes = aux_loss ? num_train_classes : 0;
  m.validate();
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.way = way;
  t.shot = shot;
  t.queries = queries;
  t.mu = aux_loss ? mu : 0.0;
  t.contrast_t = contrast_t;
  t.alpha = alpha;
  t.meta_batch = meta_batch;
  t.iterations = iterations;
  t.seed = seed;
  t.halve_on_plateau = halve_on_plateau;
  t.val_every = val_every;
  t.val_episodes = val_episodes;
  t.metric = metric;
  t.contrast_metric = contrast_metric;
  t.validate();
  return t;
}

EvalConfig RunConfig::eval_config() const {
  EvalConfig e;
  e.episodes = episodes;
  e.way = way;
  e.shot = shot;
  e.queries = queries;
  e.metric = metric;
  e.seed = seed;
  e.jobs = jobs;
  if (episodes == 0) throw ConfigError("episodes must be positive");
  if (jobs == 0) throw ConfigError("jobs must be positive");
  return e;
}

std::string RunConfig::resolved_split_file() const {
  if (!split_file.empty()) return split_file;
  return data_dir.empty() ? std::string("split.txt") : data_dir + "/split.txt";
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  c.merge_text(text);
  return c;
}

}  // namespace ficnet
