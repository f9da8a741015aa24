// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <deque>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ddistill/config.hpp"
#include "ddistill/convnet.hpp"
#include "ddistill/data.hpp"
#include "ddistill/datastore.hpp"
#include "ddistill/distillery.hpp"
#include "ddistill/error.hpp"
#include "ddistill/metrics.hpp"
#include "ddistill/sampler.hpp"
#include "ddistill/trainer.hpp"

namespace ddistill::cli {

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumeric = 4 };

namespace detail {

/// A flag whose value is routed into a config key, so flags and the config
/// file share one parsing and validation path.
struct KeyFlag {
  CLI::Option* option = nullptr;
  std::string key;
  std::string value;     // for valued flags
  bool is_switch = false;
  std::string when_set;  // value assigned by a switch
};

struct Command {
  CLI::App* app = nullptr;
  std::deque<KeyFlag> keys;
  std::map<std::string, std::string> paths;
  std::map<std::string, bool> switches;

  void key(const std::string& flag, const std::string& key, const std::string& doc) {
    auto& k = keys.emplace_back();
    k.key = key;
    k.option = app->add_option(flag, k.value, doc + " [" + key + "]");
  }

  void key_switch(const std::string& flag, const std::string& key, const std::string& value, const std::string& doc) {
    auto& k = keys.emplace_back();
    k.key = key, k.is_switch = true, k.when_set = value;
    const std::string text = doc + " [" + key + "=" + value + "]";
    k.option = app->add_flag(flag, text);
  }

  CLI::Option* path(const std::string& flag, const std::string& doc, bool required = false) {
    auto* o = app->add_option(flag, paths[flag], doc);
    if (required) o->required();
    return o;
  }

  const std::string& get(const std::string& flag) const { return paths.at(flag); }
  bool given(const std::string& flag) const { return app->count(flag) > 0; }

  void apply(ConfigFile& f) const {
    for (const auto& k : keys) {
      if (k.option->count() == 0) continue;
      f.set(k.key, k.is_switch ? k.when_set : k.value);
    }
  }
};

inline void sampler_flags(Command& c) {
  c.key("--method", "sample.method", "sampler: ancestral|fast-ode");
  c.key("--steps", "sample.steps", "solver steps");
  c.key("--order", "sample.order", "solver order 1|2");
  c.key("--variance", "sample.variance", "ancestral variance beta|beta-tilde|zero");
  c.key("--guidance", "sample.guidance", "classifier-free guidance weight");
  c.key("--seed", "sample.seed", "sampling seed");
  c.key("--batch", "sample.batch", "images per network call");
  c.key_switch("--no-clip", "sample.clip", "false", "disable x0 clipping");
}

inline void classifier_flags(Command& c) {
  c.key("--epochs", "classifier.epochs", "training epochs");
  c.key("--width", "classifier.width", "channels per conv block");
  c.key("--blocks", "classifier.blocks", "conv blocks");
  c.key("--batch-size", "classifier.batch_size", "SGD batch size");
  c.key("--lr", "classifier.lr", "peak learning rate");
  c.key_switch("--augment", "classifier.augment", "true", "random crop and flip");
}

inline ConvNetConfig classifier_config(const ConfigFile& f, const LabeledImageBatch& geometry) {
  ConvNetConfig c;
  c.channels = geometry.channels, c.height = geometry.height, c.width_px = geometry.width;
  c.num_classes = geometry.num_classes;
  f.apply(config_fields(c));
  c.validate();
  return c;
}

template <class Cfg>
Cfg read_section(const ConfigFile& f, Cfg c = {}) {
  f.apply(config_fields(c));
  return c;
}

inline std::string hex(std::uint64_t v) { return DistillManifest::hex64(v); }

inline std::string manifest_path(const std::string& dataset) { return dataset + ".manifest.txt"; }

/// Reads `key = value` lines of a manifest sidecar; missing file → empty.
inline std::map<std::string, std::string> read_manifest(const std::string& path) {
  std::map<std::string, std::string> m;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    m[ddistill::detail::trim(line.substr(0, eq))] = ddistill::detail::trim(line.substr(eq + 1));
  }
  return m;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<std::vector<std::string>> read_csv(const std::string& path, const std::string& header) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  std::vector<std::vector<std::string>> rows;
  if (!std::getline(in, line)) return rows;
  if (ddistill::detail::trim(line) != header) {
    throw DataError(path + ": unexpected header '" + line + "' (expected '" + header + "')");
  }
  while (std::getline(in, line)) {
    line = ddistill::detail::trim(line);
    if (!line.empty()) rows.push_back(split_csv_line(line));
  }
  return rows;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
}

struct FidSetup {
  FeatureExtractor extractor;
  GaussianStats reference;
};

inline FidSetup fid_setup(const std::string& classifier, const std::string& stats_path,
                          const LabeledImageBatch* reference_data) {
  FeatureExtractor fx(load_classifier(read_checkpoint(classifier)));
  GaussianStats ref;
  if (!stats_path.empty()) {
    ref = read_stats(stats_path);
  } else if (reference_data) {
    ref = fx.stats(*reference_data);
  } else {
    throw ConfigError("FID needs reference statistics or a reference dataset");
  }
  return {std::move(fx), std::move(ref)};
}

}  // namespace detail

inline const char* kAccuracyHeader = "dataset_fingerprint,ipc_or_budget,seed,accuracy,mean,std";
inline const char* kFidCurveHeader = "iteration,fid,wall_seconds";

/// Runs one command. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using detail::Command;
  CLI::App app{"ddistill: diffusion-based dataset distillation toolkit"};
  app.name("ddistill");
  app.require_subcommand(1, 1);
  app.fallthrough();
  std::string config_file;
  std::vector<std::string> sets;
  std::string workers;
  app.add_option("--config", config_file, "config file of section.key = value lines (default: $DD_CONFIG)");
  app.add_option("--set", sets, "override one config key, KEY=VALUE (repeatable)");
  app.add_option("--workers", workers, "cap on worker threads [sample.workers]");

  std::deque<Command> commands;
  auto command = [&](const std::string& name, const std::string& doc) -> Command& {
    auto& c = commands.emplace_back();
    c.app = app.add_subcommand(name, doc);
    return c;
  };

  auto& make_toy = command("make-toy", "write the procedural 4-class shapes dataset");
  make_toy.path("--out", "output dataset file", true);
  make_toy.path("--count", "number of images", true);
  make_toy.path("--seed", "generation seed");
  make_toy.path("--size", "image side length (default 16)");

  auto& import = command("import", "convert a CIFAR-style record file to the dataset format");
  import.path("--source", "record file", true);
  import.path("--layout", "cifar10 | cifar100 | label_bytes=..,label_index=..,channels=..,height=..,width=..,classes=..",
              true);
  import.path("--out", "output dataset file", true);

  auto& train = command("train", "train the class-conditional denoiser");
  train.path("--data", "training dataset", true);
  train.path("--out", "output checkpoint", true);
  auto* resume = train.path("--resume", "continue from a training checkpoint");
  auto* init = train.path("--init", "warm-start weights from a checkpoint");
  train.path("--init-skip", "regex of tensor names not copied by --init (default: label_embed)");
  train.path("--log", "metric log CSV");
  train.path("--fid-classifier", "classifier checkpoint used as FID feature extractor");
  train.path("--fid-stats", "reference statistics file (default: computed from --data)");
  train.key("--preset", "model.preset", "model preset small|mid|tiny");
  train.key("--patch", "model.patch", "patch size");
  train.key("--iterations", "train.iterations", "total optimizer updates");
  train.key("--batch-size", "train.batch_size", "images per micro-batch");
  train.key("--lr", "train.lr", "AdamW learning rate");
  train.key("--seed", "train.seed", "training seed");
  train.key("--fid-every", "train.fid_every", "FID evaluation period");
  train.key("--fid-samples", "eval.fid_samples", "images per FID evaluation");
  train.key("--checkpoint-every", "train.checkpoint_every", "checkpoint period");
  train.key("--log-every", "train.log_every", "loss logging period");
  train.key("--label-dropout", "train.label_dropout", "probability of training unconditionally");
  train.key_switch("--ema", "train.ema", "true", "keep an EMA of the weights");
  resume->excludes(init);

  auto& sample = command("sample", "generate class-balanced images from a checkpoint");
  sample.path("--checkpoint", "denoiser checkpoint", true);
  sample.path("--out", "output dataset file", true);
  sample.path("--count", "number of images", true);
  detail::sampler_flags(sample);

  auto& distill_cmd = command("distill", "build a distilled dataset under a per-class or wall-clock budget");
  distill_cmd.path("--checkpoint", "denoiser checkpoint", true);
  distill_cmd.path("--out", "output dataset file (manifest written to <out>.manifest.txt)", true);
  distill_cmd.key("--ipc", "distill.ipc", "images per class");
  distill_cmd.key("--budget-seconds", "distill.seconds", "wall-clock budget in seconds");
  detail::sampler_flags(distill_cmd);
  distill_cmd.keys[0].option->excludes(distill_cmd.keys[1].option);

  auto& fid = command("fid", "Frechet distance of generated or stored images against reference statistics");
  fid.path("--classifier", "feature-extractor classifier checkpoint", true);
  auto* fid_ref = fid.path("--reference", "reference dataset");
  auto* fid_ref_stats = fid.path("--reference-stats", "stored reference statistics");
  auto* fid_ckpt = fid.path("--checkpoint", "denoiser checkpoint to sample from");
  auto* fid_images = fid.path("--images", "dataset to score instead of sampling");
  fid.path("--write-stats", "also save the reference statistics here");
  fid.key("--samples", "eval.fid_samples", "generated images");
  detail::sampler_flags(fid);
  fid_ref->excludes(fid_ref_stats);
  fid_ckpt->excludes(fid_images);

  auto& train_clf = command("train-classifier", "train the downstream ConvNet on a dataset");
  train_clf.path("--data", "training dataset", true);
  train_clf.path("--out", "output classifier checkpoint", true);
  train_clf.path("--seed", "training seed");
  detail::classifier_flags(train_clf);

  auto& eval = command("eval", "three-seed ConvNet protocol: train on a dataset, test on real held-out data");
  eval.path("--train", "dataset to train on (e.g. distilled)", true);
  eval.path("--test", "real held-out dataset", true);
  eval.path("--real", "full real training set for the baseline");
  eval.path("--out", "accuracy table CSV to write", true);
  eval.path("--ledger", "size-versus-accuracy ledger CSV to extend");
  eval.key("--seeds", "eval.seeds", "classifier seeds");
  eval.key("--baseline-epochs", "eval.baseline_epochs", "baseline epochs");
  detail::classifier_flags(eval);

  auto& report = command("report", "merge metric logs and accuracy tables into plot-ready CSVs");
  std::vector<std::string> report_logs, report_evals;
  report.app->add_option("--logs", report_logs, "trainer metric log CSVs");
  report.app->add_option("--evals", report_evals, "accuracy table CSVs written by eval");
  report.path("--fid-out", "output FID curve CSV", true);
  report.path("--acc-out", "output accuracy table CSV", true);
  report.path("--granularity", "keep FID points every N iterations (default: all)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "ddistill: " << msg << " (see --help)\n";
    return kConfig;
  }

  Command* chosen = nullptr;
  for (auto& c : commands)
    if (c.app->parsed()) chosen = &c;
  if (!chosen) {
    err << "ddistill: no command given (see --help)\n";
    return kConfig;
  }
  auto& cmd = *chosen;
  const std::string name = cmd.app->get_name();

  try {
    ConfigFile f;
    const std::string path = config_path(config_file);
    if (!path.empty()) f = ConfigFile::load(path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + s + "'");
      f.set(ddistill::detail::trim(s.substr(0, eq)), ddistill::detail::trim(s.substr(eq + 1)));
    }
    cmd.apply(f);
    if (!workers.empty()) f.set("sample.workers", workers);
    auto path_or = [&](const std::string& flag, const std::string& fallback) {
      return cmd.given(flag) ? cmd.get(flag) : fallback;
    };
    auto int_flag = [&](const std::string& flag, long long fallback) {
      return cmd.given(flag) ? ddistill::detail::parse_int(flag, cmd.get(flag)) : fallback;
    };

    if (name == "make-toy") {
      const auto data = make_shapes_dataset(static_cast<std::size_t>(int_flag("--count", 0)),
                                            static_cast<std::uint64_t>(int_flag("--seed", 0)),
                                            static_cast<int>(int_flag("--size", 16)));
      if (data.empty()) throw ConfigError("--count must be >= 1");
      write_dataset(data, cmd.get("--out"));
      out << "wrote " << data.size() << " images to " << cmd.get("--out") << "\n";

    } else if (name == "import") {
      const auto layout = RecordLayout::parse(cmd.get("--layout"));
      const auto data = import_cifar_style(io::read_file(cmd.get("--source")), layout);
      write_dataset(data, cmd.get("--out"));
      out << "imported " << data.size() << " records (" << data.num_classes << " classes)\n";

    } else if (name == "train") {
      const auto data = read_dataset(cmd.get("--data"));
      TrainConfig tc = detail::read_section<TrainConfig>(f);
      tc.validate();
      const EvalConfig ec = detail::read_section<EvalConfig>(f);
      SamplerConfig sc = detail::read_section<SamplerConfig>(f);
      ScheduleConfig schedule_cfg = detail::read_section<ScheduleConfig>(f);
      std::optional<TrainState<float>> state;
      if (cmd.given("--resume")) {
        const auto ckpt = read_checkpoint(cmd.get("--resume"));
        state = restore_train_state(ckpt);
        schedule_cfg = checkpoint_schedule(ckpt);
        if (tc.ema != state->ema.has_value()) throw ConfigError("train.ema differs from the resumed checkpoint");
      } else {
        DenoiserConfig mc = denoiser_config(f, data.height, data.channels, data.num_classes);
        if (!f.has("model.width")) mc.width = data.width;
        mc.max_steps = std::max(mc.max_steps, schedule_cfg.steps);
        state = TrainState<float>::fresh(mc, tc);
        if (cmd.given("--init")) {
          const auto src = read_checkpoint(cmd.get("--init"));
          require_kind(src, "denoiser");
          warm_start(state->model.params(), src.params, path_or("--init-skip", "label_embed"));
          if (state->ema) state->ema = state->model.params();
        }
      }
      const auto& mc = state->model.config();
      if (mc.height != data.height || mc.width != data.width || mc.channels != data.channels ||
          mc.num_classes != data.num_classes) {
        throw DataError("training data geometry does not match the model configuration");
      }
      const NoiseSchedule sched = schedule_cfg.build();
      std::optional<detail::FidSetup> fid_cfg;
      if (cmd.given("--fid-classifier")) {
        fid_cfg = detail::fid_setup(cmd.get("--fid-classifier"), path_or("--fid-stats", ""), &data);
      }
      std::optional<MetricLog> log;
      if (cmd.given("--log")) log.emplace(cmd.get("--log"), cmd.given("--resume"));
      const std::string out_path = cmd.get("--out");
      TrainHooks<float> hooks;
      if (fid_cfg) {
        hooks.fid = [&](long, const Denoiser<float>& m) {
          return fid_eval(m, sched, fid_cfg->extractor, fid_cfg->reference, static_cast<std::size_t>(ec.fid_samples),
                          sc);
        };
      }
      hooks.log = [&](const MetricRow& r) {
        if (log) log->write(r);
        out << "iter " << r.iteration;
        if (!std::isnan(r.loss)) out << " loss " << r.loss;
        if (!std::isnan(r.fid)) out << " fid " << r.fid;
        out << "\n" << std::flush;
      };
      hooks.checkpoint = [&](const TrainState<float>& s) {
        write_checkpoint(make_checkpoint(s, schedule_cfg), out_path);
        write_checkpoint(make_checkpoint(s, schedule_cfg), out_path + "." + std::to_string(s.iteration));
      };
      ddistill::train(*state, data, tc, sched, hooks);
      write_checkpoint(make_checkpoint(*state, schedule_cfg), out_path);
      out << "wrote checkpoint " << out_path << " at iteration " << state->iteration << "\n";

    } else if (name == "sample") {
      const auto ckpt = read_checkpoint(cmd.get("--checkpoint"));
      const auto model = load_denoiser(ckpt);
      const auto sched = checkpoint_schedule(ckpt).build();
      const SamplerConfig sc = detail::read_section<SamplerConfig>(f);
      const auto n = int_flag("--count", 0);
      if (n < 1) throw ConfigError("--count must be >= 1");
      const auto labels = balanced_labels(static_cast<std::size_t>(n), model.config().num_classes);
      const auto images = sample_class_batch(model, sched, labels, sc);
      write_dataset(images, cmd.get("--out"));
      out << "wrote " << images.size() << " samples (" << sc.describe() << ")\n";

    } else if (name == "distill") {
      const auto ckpt = read_checkpoint(cmd.get("--checkpoint"));
      const auto model = load_denoiser(ckpt);
      const auto sched = checkpoint_schedule(ckpt).build();
      const SamplerConfig sc = detail::read_section<SamplerConfig>(f);
      const DistillConfig dc = detail::read_section<DistillConfig>(f);
      const bool by_time = cmd.given("--budget-seconds") || (!cmd.given("--ipc") && dc.seconds > 0);
      const Budget budget = by_time ? Budget::wall_clock(dc.seconds) : Budget::images_per_class(dc.ipc);
      const auto result = ddistill::distill(model, sched, sc, budget, ckpt.fingerprint());
      write_dataset(result.images, cmd.get("--out"));
      result.manifest.write(detail::manifest_path(cmd.get("--out")));
      out << "distilled " << result.images.size() << " images in " << result.manifest.wall_seconds << " s ("
          << result.manifest.images_per_second << " images/s)\n";

    } else if (name == "fid") {
      if (!cmd.given("--reference") && !cmd.given("--reference-stats")) {
        throw ConfigError("fid needs --reference or --reference-stats");
      }
      if (!cmd.given("--checkpoint") && !cmd.given("--images")) throw ConfigError("fid needs --checkpoint or --images");
      std::optional<LabeledImageBatch> ref_data;
      if (cmd.given("--reference")) ref_data = read_dataset(cmd.get("--reference"));
      auto setup = detail::fid_setup(cmd.get("--classifier"), path_or("--reference-stats", ""),
                                     ref_data ? &*ref_data : nullptr);
      if (cmd.given("--write-stats")) write_stats(setup.reference, cmd.get("--write-stats"));
      double value;
      if (cmd.given("--checkpoint")) {
        const auto ckpt = read_checkpoint(cmd.get("--checkpoint"));
        const EvalConfig ec = detail::read_section<EvalConfig>(f);
        value = fid_eval(load_denoiser(ckpt), checkpoint_schedule(ckpt).build(), setup.extractor, setup.reference,
                         static_cast<std::size_t>(ec.fid_samples), detail::read_section<SamplerConfig>(f));
      } else {
        if (setup.reference.fingerprint != setup.extractor.fingerprint()) {
          throw DataError("reference statistics were computed with a different feature extractor");
        }
        value = frechet_distance(setup.extractor.stats(read_dataset(cmd.get("--images"))), setup.reference);
      }
      out << "fid " << MetricLog::cell(value) << "\n";

    } else if (name == "train-classifier") {
      const auto data = read_dataset(cmd.get("--data"));
      const auto cfg = detail::classifier_config(f, data);
      const auto net = train_classifier(data, cfg, static_cast<std::uint64_t>(int_flag("--seed", 0)));
      write_checkpoint(make_checkpoint(net), cmd.get("--out"));
      out << "wrote classifier " << cmd.get("--out") << "\n";

    } else if (name == "eval") {
      const auto train_set = read_dataset(cmd.get("--train"));
      const auto test_set = read_dataset(cmd.get("--test"));
      if (train_set.num_classes != test_set.num_classes || train_set.image_numel() != test_set.image_numel()) {
        throw DataError("train and test datasets differ in geometry or class count");
      }
      const auto cfg = detail::classifier_config(f, train_set);
      const EvalConfig ec = detail::read_section<EvalConfig>(f);
      std::optional<LabeledImageBatch> real;
      ConvNetConfig base = cfg;
      if (ec.baseline_epochs > 0) base.epochs = ec.baseline_epochs;
      if (ec.baseline_batch_size > 0) base.batch_size = ec.baseline_batch_size;
      if (cmd.given("--real")) real = read_dataset(cmd.get("--real"));
      const auto rep = protocol(train_set, test_set, cfg, ec.seeds, real ? &*real : nullptr, &base);
      const auto manifest = detail::read_manifest(detail::manifest_path(cmd.get("--train")));
      std::string budget;
      if (manifest.count("budget")) {
        budget = manifest.at("budget");
      } else {
        const auto counts = train_set.class_counts();
        budget = "ipc=" + std::to_string(*std::min_element(counts.begin(), counts.end()));
      }
      std::ostringstream table;
      table << kAccuracyHeader << "\n";
      auto rows = [&](const std::string& fp, const std::string& b, const std::vector<double>& acc, double m, double s) {
        for (std::size_t i = 0; i < acc.size(); ++i) {
          table << fp << ',' << b << ',' << rep.seeds[i] << ',' << MetricLog::cell(acc[i]) << ',' << MetricLog::cell(m)
                << ',' << MetricLog::cell(s) << "\n";
        }
      };
      rows(detail::hex(rep.train_fingerprint), budget, rep.accuracies, rep.mean(), rep.stddev());
      if (real) rows(detail::hex(real->fingerprint()), "full", rep.baseline_accuracies, rep.baseline_mean(),
                     rep.baseline_stddev());
      detail::write_text(cmd.get("--out"), table.str());
      if (cmd.given("--ledger")) {
        RiskLedger ledger;
        std::ifstream probe(cmd.get("--ledger"));
        if (probe.good()) {
          for (const auto& r : detail::read_csv(cmd.get("--ledger"), RiskLedger::kHeader)) {
            if (r.size() < 3) throw DataError(cmd.get("--ledger") + ": malformed row");
            ledger.add(static_cast<std::size_t>(ddistill::detail::parse_int("images", r[0])),
                       ddistill::detail::parse_real("accuracy", r[1]), std::stoull(r[2], nullptr, 16));
          }
        }
        const std::uint64_t fp = manifest.count("manifest_fingerprint")
                                     ? std::stoull(manifest.at("manifest_fingerprint"), nullptr, 16)
                                     : rep.train_fingerprint;
        ledger.add(train_set.size(), rep.mean(), fp);
        detail::write_text(cmd.get("--ledger"), ledger.to_csv());
      }
      out << "accuracy mean " << rep.mean() << " std " << rep.stddev();
      if (real) out << " ; real baseline " << rep.baseline_mean();
      out << "\n";

    } else if (name == "report") {
      struct Point {
        long iteration;
        std::string fid, wall;
      };
      std::map<long, Point> points;
      for (const auto& p : report_logs) {
        for (const auto& r : detail::read_csv(p, MetricLog::kHeader)) {
          if (r.size() < 4) throw DataError(p + ": malformed metric row");
          if (r[2].empty()) continue;
          const long it = static_cast<long>(ddistill::detail::parse_int("iteration", r[0]));
          points[it] = Point{it, r[2], r[3]};
        }
      }
      const long every = static_cast<long>(int_flag("--granularity", 0));
      if (every < 0) throw ConfigError("--granularity must be >= 0");
      std::ostringstream curve;
      curve << kFidCurveHeader << "\n";
      const long last = points.empty() ? 0 : points.rbegin()->first;
      for (const auto& [it, p] : points) {
        if (every > 0 && it % every != 0 && it != last) continue;
        curve << it << ',' << p.fid << ',' << p.wall << "\n";
      }
      detail::write_text(cmd.get("--fid-out"), curve.str());
      std::ostringstream acc;
      acc << kAccuracyHeader << "\n";
      std::size_t acc_rows = 0;
      for (const auto& p : report_evals) {
        for (const auto& r : detail::read_csv(p, kAccuracyHeader)) {
          for (std::size_t i = 0; i < r.size(); ++i) acc << (i ? "," : "") << r[i];
          acc << "\n";
          ++acc_rows;
        }
      }
      detail::write_text(cmd.get("--acc-out"), acc.str());
      out << "report: " << points.size() << " FID points, " << acc_rows << " accuracy rows\n";
    }
    return kOk;
  } catch (const ConfigError& e) {
    err << "ddistill " << name << ": config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    err << "ddistill " << name << ": data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    err << "ddistill " << name << ": numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    err << "ddistill " << name << ": " << e.what() << "\n";
    return kInternal;
  }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

/// Help text of the top level and every command, concatenated.
inline std::string full_help() {
  std::ostringstream out, err;
  std::string text;
  run({"--help"}, out, err);
  text += out.str();
  for (const char* c : {"make-toy", "import", "train", "sample", "distill", "fid", "train-classifier", "eval", "report"}) {
    std::ostringstream o, e;
    run({c, "--help"}, o, e);
    text += o.str();
  }
  return text;
}

}  // namespace ddistill::cli
