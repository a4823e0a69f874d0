#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "ficnet/config.hpp"
#include "ficnet/data_io.hpp"
#include "ficnet/episodic.hpp"
#include "ficnet/gradcheck_suite.hpp"

namespace fs = std::filesystem;

namespace ficnet::cli {

namespace {

// Flag values collected in command-line order and applied over the file config.
struct Overrides {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> values;
};

void key_option(CLI::App* cmd, Overrides& o, const std::string& flag, const std::string& key,
                const std::string& help) {
  cmd->add_option_function<std::string>(
      flag, [&o, key](const std::string& v) { o.values.emplace_back(key, v); }, help);
}

void switch_off(CLI::App* cmd, Overrides& o, const std::string& flag, const std::string& key,
                const std::string& help) {
  cmd->add_flag_callback(flag, [&o, key] { o.values.emplace_back(key, "false"); }, help);
}

void add_config(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_file, "key=value configuration file; flags override it");
  key_option(cmd, o, "--seed", "seed", "seed for every stochastic step");
}

void add_data(CLI::App* cmd, Overrides& o) {
  key_option(cmd, o, "--data", "data_dir", "dataset root (class directories + split.txt)");
  key_option(cmd, o, "--split-file", "split_file", "split file (default <data>/split.txt)");
  key_option(cmd, o, "--side", "side", "image side after resizing");
}

void add_model(CLI::App* cmd, Overrides& o) {
  key_option(cmd, o, "--channels", "channels", "backbone channels C");
  key_option(cmd, o, "--blocks", "blocks", "backbone blocks");
  key_option(cmd, o, "--window", "window", "neighborhood extent U = V (1 or 5)");
  key_option(cmd, o, "--loops", "loops", "crisscross loops L");
  key_option(cmd, o, "--qk-ratio", "qk_ratio", "C / C'' for the crisscross query and key");
  key_option(cmd, o, "--temperature", "temperature", "attention temperature T");
  key_option(cmd, o, "--precision", "precision", "32 or 64");
  switch_off(cmd, o, "--no-mfn", "use_mfn", "bypass the multi-frequency neighborhood module");
  switch_off(cmd, o, "--no-bcc", "use_bcc", "skip the crisscross loops");
  switch_off(cmd, o, "--no-dca", "use_dca", "uniform attention instead of refined correlation");
  switch_off(cmd, o, "--no-aux", "aux_loss", "drop the auxiliary classification loss");
}

void add_episode(CLI::App* cmd, Overrides& o) {
  key_option(cmd, o, "--way", "way", "classes per episode N");
  key_option(cmd, o, "--shot", "shot", "support images per class K");
  key_option(cmd, o, "--queries", "queries", "query images per class P");
  key_option(cmd, o, "--metric", "metric", "cosine, euclidean or manhattan");
}

void add_training(CLI::App* cmd, Overrides& o) {
  key_option(cmd, o, "--mu", "mu", "auxiliary loss weight");
  key_option(cmd, o, "--t", "contrast_t", "contrastive temperature t");
  key_option(cmd, o, "--contrast-metric", "contrast_metric", "similarity inside the contrastive loss");
  key_option(cmd, o, "--alpha", "alpha", "SGD learning rate");
  key_option(cmd, o, "--meta-batch", "meta_batch", "episodes per update");
  key_option(cmd, o, "--iterations", "iterations", "meta-iterations");
  key_option(cmd, o, "--val-every", "val_every", "validate every n iterations (0: never)");
  key_option(cmd, o, "--val-episodes", "val_episodes", "episodes per validation");
  cmd->add_flag_callback(
      "--halve-on-plateau", [&o] { o.values.emplace_back("halve_on_plateau", "true"); },
      "halve the learning rate when validation accuracy stops improving");
}

RunConfig resolve(const Overrides& o, RunConfig base = {}) {
  if (!o.config_file.empty()) base.merge_file(o.config_file);
  for (const auto& [k, v] : o.values) base.set(k, v);
  return base;
}

struct Data {
  DatasetIndex index;
  ImageSplit train, val, test;
};

Data load_data(const RunConfig& c, bool need_test) {
  if (c.data_dir.empty()) throw ConfigError("no dataset given (--data)");
  Data d;
  d.index = scan_dataset(c.data_dir, c.resolved_split_file());
  d.train = load_split(d.index, Split::kTrain, c.side);
  d.val = load_split(d.index, Split::kVal, c.side);
  if (need_test) d.test = load_split(d.index, Split::kTest, c.side);
  return d;
}

FrequencyIndexSet frequencies(const RunConfig& c) {
  if (!c.freq_file.empty()) return FrequencyIndexSet::load(c.freq_file);
  return FrequencyIndexSet::low_first(c.num_freq, 5, 5);
}

std::string percent_ci(double mean, double half) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f\xC2\xB1%.2f", 100.0 * mean, 100.0 * half);
  return buf;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t classes = 20, per_class = 30, side = 32, val = 0, test = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SynthSpec spec;
  spec.num_classes = a.classes;
  spec.samples_per_class = a.per_class;
  spec.side = a.side;
  spec.seed = a.seed;
  spec.val_classes = a.val;
  spec.test_classes = a.test;
  generate_synthetic(spec, a.out);
  out << (fs::path(a.out) / "manifest.txt").string() << '\n';
  return kOk;
}

template <class T>
int cmd_select_freq(RunConfig c, const std::string& out_file, std::ostream& out) {
  const Data d = load_data(c, false);
  if (d.train.num_classes() < c.way || d.val.num_classes() < c.way) {
    throw DataError("frequency selection needs " + std::to_string(c.way) + " classes in both train and val");
  }
  FreqSelectConfig fs_cfg;
  fs_cfg.m = c.num_freq;
  fs_cfg.train = c.train_config();
  fs_cfg.eval_episodes = c.val_episodes;
  RunConfig base = c;
  base.use_mfn = true;
  base.num_freq = 1;
  const FreqSelection sel =
      select_frequency_indices<T>(base.model_config(d.train.num_classes()), d.train, d.val, fs_cfg, nullptr);
  out << "validation accuracy per DCT frequency (row i, column j)\n";
  char buf[32];
  out << "     ";
  for (std::size_t j = 0; j < fs_cfg.grid_w; ++j) {
    std::snprintf(buf, sizeof buf, "   j=%zu ", j);
    out << buf;
  }
  out << '\n';
  for (std::size_t i = 0; i < fs_cfg.grid_h; ++i) {
    std::snprintf(buf, sizeof buf, "i=%zu  ", i);
    out << buf;
    for (std::size_t j = 0; j < fs_cfg.grid_w; ++j) {
      std::snprintf(buf, sizeof buf, " %.4f ", sel.scores[i * fs_cfg.grid_w + j]);
      out << buf;
    }
    out << '\n';
  }
  sel.selected.save(out_file);
  out << "selected " << sel.selected.size() << " frequencies -> " << out_file << '\n';
  return kOk;
}

template <class T>
int cmd_train(const RunConfig& c, std::ostream& out) {
  const Data d = load_data(c, false);
  const TrainConfig tc = c.train_config();
  if (d.train.num_classes() < tc.way) {
    throw DataError("training split has " + std::to_string(d.train.num_classes()) + " classes, episodes need " +
                    std::to_string(tc.way));
  }
  const ModelConfig mc = c.model_config(d.train.num_classes());
  FicNet<T> model(mc, frequencies(c), c.seed);

  fs::create_directories(c.out_dir);
  const fs::path log_path = fs::path(c.out_dir) / "train.log";
  std::ofstream log(log_path);
  if (!log) throw DataError("cannot write " + log_path.string());
  log << "# " << model.params().element_count() << " parameters\n";
  const bool validate = tc.val_every > 0 && d.val.num_classes() >= tc.way;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainLog result = meta_train(model, d.train, tc, validate ? &d.val : nullptr, &log);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path ckpt_path = fs::path(c.out_dir) / "model.ckpt";
  save_checkpoint(ckpt_path, make_checkpoint(model, c.to_text(), c.seed, tc.iterations));
  write_file(fs::path(c.out_dir) / "config.txt", c.to_text());
  if (!result.iterations.empty()) {
    const auto& last = result.iterations.back();
    char buf[128];
    std::snprintf(buf, sizeof buf, "iter=%zu loss=%.6f Lc=%.6f La=%.6f (%.1fs)", last.iter, last.loss, last.lc,
                  last.la, secs);
    out << buf << '\n';
  }
  for (const auto& [iter, acc] : result.validation) out << "val iter=" << iter << " acc=" << acc << '\n';
  out << "checkpoint=" << ckpt_path.string() << "\nlog=" << log_path.string() << '\n';
  return kOk;
}

template <class T>
int cmd_eval(const RunConfig& c, const Checkpoint<T>& ckpt, Split split, const std::string& report_path,
             std::ostream& out) {
  const Data d = load_data(c, split == Split::kTest);
  const ImageSplit& data = split == Split::kTest ? d.test : split == Split::kVal ? d.val : d.train;
  const EvalConfig ec = c.eval_config();
  if (data.num_classes() < ec.way) {
    throw DataError(std::string(split_name(split)) + " split has " + std::to_string(data.num_classes()) +
                    " classes, episodes need " + std::to_string(ec.way));
  }
  FicNet<T> model(c.model_config(d.train.num_classes()), FrequencyIndexSet::from_text(ckpt.freq_text), c.seed);
  restore_checkpoint(model, ckpt);
  EvalReport report = evaluate(model, data, ec);
  report.config = c.to_text();
  write_file(report_path, report.to_text());
  out << "acc=" << percent_ci(report.mean_acc, report.ci95) << '\n';
  out << "report=" << report_path << '\n';
  return kOk;
}

template <class T>
int cmd_gradcheck(const GradcheckSuiteOptions& opt, std::ostream& out) {
  bool ok = true;
  double total = 0;
  run_gradcheck_suite<T>(opt, [&](const OpCheck& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-30s worst=%.3e tol=%.0e elements=%-5zu %s", r.name.c_str(), r.result.worst,
                  r.tolerance, r.result.elements, r.passed() ? "ok" : "FAIL");
    out << buf << std::endl;
    ok = ok && r.passed();
    total += r.seconds;
  });
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s (%.1fs)", ok ? "all within tolerance" : "tolerance exceeded", total);
  out << buf << '\n';
  return ok ? kOk : kFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot fine-grained classification: synthetic data, frequency selection, training, evaluation"};
  app.name("ficnet");
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate the synthetic fine-grained corpus");
  s->add_option("--classes", synth.classes, "number of classes")->capture_default_str();
  s->add_option("--per-class", synth.per_class, "images per class")->capture_default_str();
  s->add_option("--side", synth.side, "image side in pixels")->capture_default_str();
  s->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
  s->add_option("--val-classes", synth.val, "validation classes (0: a quarter)");
  s->add_option("--test-classes", synth.test, "test classes (0: a quarter)");
  s->add_option("--out", synth.out, "output directory")->required();

  Overrides sf;
  std::string freq_out;
  auto* f = app.add_subcommand("select-freq", "score every 5x5 DCT frequency alone and keep the best M");
  add_config(f, sf);
  add_data(f, sf);
  add_model(f, sf);
  add_episode(f, sf);
  add_training(f, sf);
  key_option(f, sf, "--m", "num_freq", "frequencies to keep");
  f->add_option("--out", freq_out, "frequency file to write")->required();

  Overrides tr;
  auto* t = app.add_subcommand("train", "meta-train a model and write a checkpoint and log");
  add_config(t, tr);
  add_data(t, tr);
  add_model(t, tr);
  add_episode(t, tr);
  add_training(t, tr);
  key_option(t, tr, "--freq", "freq_file", "frequency file from select-freq (default: lowest first)");
  key_option(t, tr, "--m", "num_freq", "frequencies when no file is given");
  key_option(t, tr, "--out", "out_dir", "output directory");

  Overrides ev;
  std::string checkpoint, report, split_token = "test";
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint over random episodes");
  e->add_option("--config", ev.config_file, "key=value configuration file; flags override it");
  e->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  e->add_option("--split", split_token, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  e->add_option("--report", report, "EvalReport file (default <checkpoint dir>/eval_report.txt)");
  key_option(e, ev, "--seed", "seed", "episode seed");
  add_data(e, ev);
  add_episode(e, ev);
  key_option(e, ev, "--episodes", "episodes", "number of episodes");
  key_option(e, ev, "--jobs", "jobs", "worker threads");

  GradcheckSuiteOptions gc;
  std::size_t precision = 64;
  bool no_pipeline = false;
  auto* g = app.add_subcommand("gradcheck", "finite-difference check of every differentiable operation");
  g->add_option("--precision", precision, "32 or 64")->check(CLI::IsMember({32, 64}))->capture_default_str();
  g->add_option("--seed", gc.seed, "test point seed")->capture_default_str();
  g->add_option("--filter", gc.filter, "only checks whose name contains this");
  g->add_flag("--no-pipeline", no_pipeline, "skip the full-loss check");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& ex) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& ex) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    if (f->parsed()) {
      const RunConfig c = resolve(sf);
      return c.precision == 64 ? cmd_select_freq<double>(c, freq_out, out) : cmd_select_freq<float>(c, freq_out, out);
    }
    if (t->parsed()) {
      const RunConfig c = resolve(tr);
      return c.precision == 64 ? cmd_train<double>(c, out) : cmd_train<float>(c, out);
    }
    if (e->parsed()) {
      const Split split = parse_split(split_token);
      if (report.empty()) report = (fs::path(checkpoint).parent_path() / "eval_report.txt").string();
      // The checkpoint's configuration describes the model; flags adjust the episodes.
      const std::string bytes = read_file(checkpoint);
      const auto header = decode_checkpoint<double>(bytes);
      RunConfig c = parse_run_config(header.config_text);
      c = resolve(ev, c);
      if (c.precision == 64) return cmd_eval<double>(c, header, split, report, out);
      return cmd_eval<float>(c, decode_checkpoint<float>(bytes), split, report, out);
    }
    if (g->parsed()) {
      gc.include_pipeline = !no_pipeline;
      return precision == 32 ? cmd_gradcheck<float>(gc, out) : cmd_gradcheck<double>(gc, out);
    }
  } catch (const ConfigError& ex) {
    err << "configuration error: " << ex.what() << '\n';
    return kUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace ficnet::cli
