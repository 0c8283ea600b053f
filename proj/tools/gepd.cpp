#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "gepd/harness.hpp"

using namespace gepd;
using namespace gepd::harness;
namespace fs = std::filesystem;

namespace {

constexpr int kExitStage = 2;
constexpr int kExitQualityGate = 3;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "INI config file (defaults when omitted)")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "Override a config key, section.key=value (repeatable)");
  app->add_option("--seed", c.seed, "Master seed (replaces experiment.seeds)");
  app->add_option("-o,--out-dir", c.out_dir, "Output directory (default: a new versioned run directory)");
  app->add_flag("-q,--quiet", c.quiet, "Suppress progress lines");
}

void log_line(const Common& c, const std::string& line) {
  if (!c.quiet) std::cerr << line << '\n';
}

// Converts any failure inside `f` to a StageError tagged with `stage`.
template <typename F>
auto staged(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

ExperimentConfig load(const Common& c) {
  return staged("config", [&] {
    ExperimentConfig cfg = c.config.empty() ? apply_overrides(ExperimentConfig{}, c.sets) : load_config(c.config, c.sets);
    if (c.seed) cfg.seeds = {*c.seed};
    return cfg;
  });
}

std::uint64_t master_seed(const ExperimentConfig& cfg) { return cfg.seeds.empty() ? 0 : cfg.seeds.front(); }

fs::path out_dir(const Common& c, const ExperimentConfig& cfg, const std::string& command) {
  if (!c.out_dir.empty()) {
    fs::create_directories(c.out_dir);
    return c.out_dir;
  }
  return next_run_dir(default_output_root(), cfg.name + "-" + command);
}

// Preprocessed epochs from a saved file, or from the manifest in the config.
EpochSet input_epochs(const std::string& file, const fs::path& manifest, const ExperimentConfig& cfg,
                      const Common& c) {
  if (!file.empty()) return staged("load", [&] { return load_epochs(file); });
  return staged("preprocess", [&] {
    if (manifest.empty()) throw std::invalid_argument("no epoch file given and no dataset manifest configured");
    dataio::LoadOptions opts;
    opts.target_rate_hz = cfg.preprocess.target_rate_hz;
    std::vector<std::string> warnings;
    EpochSet e = dataio::preprocess(dataio::load_dataset(manifest, opts), cfg.preprocess, &warnings);
    for (const auto& w : warnings) log_line(c, "[preprocess] warning: " + w);
    log_line(c, fmt::format("[preprocess] {}: {} epochs of {} x {}", manifest.string(), e.count(), e.channels(),
                            e.samples()));
    return e;
  });
}

void print_path(const std::string& what, const fs::path& p) { fmt::print("{}: {}\n", what, p.string()); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EEG Parkinson's disease pipeline: augmentation, channel pruning, quality scoring and classification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "gepd 0.1.0");
  Common common;

  // synth
  std::string synth_name = "synthetic";
  bool synth_csv = false;
  auto* synth = app.add_subcommand("synth", "Write a synthetic HC/PD dataset and manifest ([synth] section)");
  add_common(synth, common);
  synth->add_option("--name", synth_name, "Dataset name (manifest file stem)");
  synth->add_flag("--csv", synth_csv, "Write CSV signal files instead of float32 binaries");

  // preprocess
  std::string pre_dataset;
  auto* pre = app.add_subcommand("preprocess", "Filter, re-reference, epoch and z-score a dataset");
  add_common(pre, common);
  pre->add_option("--dataset", pre_dataset, "Manifest to read (default: experiment.train_dataset)");

  // train-gan
  std::string gan_epochs, gan_group = "both";
  auto* tgan = app.add_subcommand("train-gan", "Train one WGAN per group on real epochs");
  add_common(tgan, common);
  tgan->add_option("--epochs", gan_epochs, "Epoch file from preprocess (default: preprocess train_dataset)");
  tgan->add_option("--group", gan_group, "hc, pd or both")->check(CLI::IsMember({"hc", "pd", "both"}));

  // generate
  std::string gen_hc, gen_pd, gen_real;
  std::optional<double> gen_delta;
  std::optional<std::size_t> gen_count;
  bool gen_fuse = false;
  auto* gen = app.add_subcommand("generate", "Generate epochs from trained GAN checkpoints");
  add_common(gen, common);
  gen->add_option("--gan-hc", gen_hc, "HC generator checkpoint");
  gen->add_option("--gan-pd", gen_pd, "PD generator checkpoint");
  gen->add_option("--real", gen_real, "Real epoch file that sets per-class counts");
  gen->add_option("--delta", gen_delta, "Generated-to-real ratio per class (default: experiment.delta)");
  gen->add_option("--count", gen_count, "Fixed number of epochs from a single checkpoint");
  gen->add_flag("--fuse", gen_fuse, "Also write real plus generated epochs as fused.bin");

  // assess-quality
  std::string aq_real, aq_generated, aq_model;
  bool aq_strict = false;
  auto* aq = app.add_subcommand("assess-quality", "Score generated epochs with an LSTM autoencoder");
  add_common(aq, common);
  aq->add_option("--real", aq_real, "Real epoch file (calibration and autoencoder training)")->required();
  aq->add_option("--generated", aq_generated, "Generated epoch file to score")->required();
  aq->add_option("--autoencoder", aq_model, "Existing autoencoder checkpoint (default: train one)");
  aq->add_flag("--strict", aq_strict, "Fail when the mean score is below the poor bound");

  // prune
  std::string pr_real, pr_generated;
  std::optional<double> pr_alpha, pr_beta;
  std::optional<std::string> pr_combine;
  auto* pr = app.add_subcommand("prune", "Compute channel divergences and a pruning mask");
  add_common(pr, common);
  pr->add_option("--real", pr_real, "Real epoch file")->required();
  pr->add_option("--generated", pr_generated, "Generated epoch file")->required();
  pr->add_option("--alpha", pr_alpha, "HC/PD threshold scale");
  pr->add_option("--beta", pr_beta, "Real/generated threshold scale");
  pr->add_option("--combine", pr_combine, "intersection or union")->check(CLI::IsMember({"intersection", "union"}));

  // train-classifier
  std::string tc_epochs, tc_generated, tc_mask;
  auto* tc = app.add_subcommand("train-classifier", "Train the classifier on real and optional generated epochs");
  add_common(tc, common);
  tc->add_option("--epochs", tc_epochs, "Real epoch file (default: preprocess train_dataset)");
  tc->add_option("--generated", tc_generated, "Generated epochs to fuse with the real set");
  tc->add_option("--mask", tc_mask, "Channel mask from prune");

  // evaluate
  std::string ev_model, ev_epochs, ev_dataset;
  std::optional<std::string> ev_level;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a classifier checkpoint on held-out data");
  add_common(ev, common);
  ev->add_option("--classifier", ev_model, "Classifier checkpoint")->required();
  ev->add_option("--epochs", ev_epochs, "Test epoch file");
  ev->add_option("--dataset", ev_dataset, "Test manifest (default: experiment.test_dataset)");
  ev->add_option("--level", ev_level, "epoch or subject_majority")
      ->check(CLI::IsMember({"epoch", "subject_majority"}));

  // run
  std::string run_train, run_test, run_root;
  std::optional<std::string> run_mode;
  auto* run = app.add_subcommand("run", "Run the full pipeline and write a report directory");
  add_common(run, common);
  run->add_option("--train", run_train, "Training manifest");
  run->add_option("--test", run_test, "Test manifest (cross_dataset mode)");
  run->add_option("--mode", run_mode, "single_dataset or cross_dataset")
      ->check(CLI::IsMember({"single_dataset", "cross_dataset"}));
  run->add_option("--output-root", run_root, "Root for run directories (default: $GEPD_OUTPUT_ROOT or ./runs)");

  // sweep-delta
  std::vector<double> sw_deltas{1.0, 1.7, 2.0, 3.0};
  std::string sw_root;
  auto* sw = app.add_subcommand("sweep-delta", "Repeat fusion and classification over several delta values");
  add_common(sw, common);
  sw->add_option("--deltas", sw_deltas, "Delta values")->delimiter(',');
  sw->add_option("--output-root", sw_root, "Root for run directories (default: $GEPD_OUTPUT_ROOT or ./runs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (app.get_subcommands().empty()) std::cerr << app.help();
    return code == 0 ? 1 : code;
  }

  auto logger = [&](const std::string& line) { log_line(common, line); };

  try {
    if (*synth) {
      const auto cfg = load(common);
      const auto dir = out_dir(common, cfg, "synth");
      const auto manifest = staged("synth", [&] {
        return dataio::write_dataset(dir, synth_name, dataio::synth_dataset(cfg.synth, master_seed(cfg)), synth_csv);
      });
      print_path("manifest", manifest);
    } else if (*pre) {
      const auto cfg = load(common);
      const EpochSet e = input_epochs("", pre_dataset.empty() ? cfg.train_dataset : fs::path(pre_dataset), cfg, common);
      const auto path = out_dir(common, cfg, "preprocess") / "epochs.bin";
      staged("preprocess", [&] { save_epochs(path, e); });
      print_path("epochs", path);
    } else if (*tgan) {
      const auto cfg = load(common);
      const EpochSet e = input_epochs(gan_epochs, cfg.train_dataset, cfg, common);
      const auto dir = out_dir(common, cfg, "train-gan");
      for (Label label : {Label::HC, Label::PD}) {
        const std::string tag = label == Label::HC ? "hc" : "pd";
        if (gan_group != "both" && gan_group != tag) continue;
        const auto ckpt = staged("train-gan", [&] {
          const EpochSet group = e.subset(e.indices_where(label, Provenance::Real));
          logger(fmt::format("[train-gan] {}: {} real epochs", to_string(label), group.count()));
          return augment::train_gan(group, cfg.gan, stage_seed(master_seed(cfg), "gan-" + tag),
                                    [&](std::size_t epoch, double critic, double w, double g) {
                                      if ((epoch + 1) % 50 == 0 || epoch == 0) {
                                        logger(fmt::format("[train-gan] {} epoch {}: critic {:.4g} W {:.4g} gen {:.4g}",
                                                           tag, epoch + 1, critic, w, g));
                                      }
                                    });
        });
        const auto path = dir / fmt::format("gan_{}.ckpt", tag);
        augment::save_checkpoint(path, ckpt);
        print_path("gan_" + tag, path);
      }
    } else if (*gen) {
      const auto cfg = load(common);
      const auto dir = out_dir(common, cfg, "generate");
      const auto seed = stage_seed(master_seed(cfg), "generate");
      EpochSet generated;
      std::optional<EpochSet> real;
      staged("generate", [&] {
        if (gen_count) {
          if (gen_hc.empty() == gen_pd.empty()) throw std::invalid_argument("--count needs exactly one of --gan-hc/--gan-pd");
          generated = augment::generate(augment::load_checkpoint(gen_hc.empty() ? gen_pd : gen_hc), *gen_count, seed);
        } else {
          if (gen_hc.empty() || gen_pd.empty()) throw std::invalid_argument("--gan-hc and --gan-pd are required without --count");
          real = input_epochs(gen_real, cfg.train_dataset, cfg, common);
          generated = augment::generate_for(*real, augment::load_checkpoint(gen_hc), augment::load_checkpoint(gen_pd),
                                            {gen_delta.value_or(cfg.delta), seed});
        }
        save_epochs(dir / "generated.bin", generated);
        if (gen_fuse) {
          if (!real) throw std::invalid_argument("--fuse needs real epochs, not --count");
          save_epochs(dir / "fused.bin", concat(*real, generated));
        }
      });
      print_path("generated", dir / "generated.bin");
      if (gen_fuse) print_path("fused", dir / "fused.bin");
    } else if (*aq) {
      const auto cfg = load(common);
      const auto dir = out_dir(common, cfg, "assess-quality");
      const auto report = staged("quality", [&] {
        const EpochSet real = load_epochs(aq_real);
        const EpochSet generated = load_epochs(aq_generated);
        quality::AutoencoderCheckpoint ae;
        if (aq_model.empty()) {
          ae = quality::train_autoencoder(real, cfg.autoencoder, stage_seed(master_seed(cfg), "quality"));
          quality::save_checkpoint(dir / "autoencoder.ckpt", ae);
        } else {
          ae = quality::load_checkpoint(aq_model);
        }
        auto r = quality::score(ae, generated, real, cfg.quality_bins);
        quality::write_report(dir / "quality.json", r);
        if (cfg.write_images) quality::write_histogram_svg(dir / "quality.svg", r);
        return r;
      });
      fmt::print("{}\n", quality::to_json(report).dump(2));
      print_path("report", dir / "quality.json");
      if (report.mean_score < quality::kPoorThreshold) {
        if (aq_strict || cfg.quality_gate == GateMode::Strict) {
          throw QualityGateError(report.mean_score, quality::kPoorThreshold);
        }
        if (cfg.quality_gate == GateMode::Warn) {
          logger(fmt::format("[quality] warning: mean score {:.4f} is below {:.2f}", report.mean_score,
                             quality::kPoorThreshold));
        }
      }
    } else if (*pr) {
      auto cfg = load(common);
      if (pr_alpha) cfg.prune.alpha = *pr_alpha;
      if (pr_beta) cfg.prune.beta = *pr_beta;
      if (pr_combine) cfg.prune.combine = pruning::parse_combine(*pr_combine);
      const auto dir = out_dir(common, cfg, "prune");
      const auto mask = staged("prune", [&] {
        const auto table = pruning::similarity_table(concat(load_epochs(pr_real), load_epochs(pr_generated)),
                                                     cfg.histogram);
        auto m = pruning::prune(table, cfg.prune);
        pruning::export_similarity(table, m, dir, cfg.write_images);
        write_mask(dir / "mask.json", m);
        logger(fmt::format("[prune] kept {} of {} channels", m.retained.size(), table.rows.size()));
        return m;
      });
      fmt::print("retained: {}\n", fmt::join(mask.retained, ", "));
      print_path("mask", dir / "mask.json");
      print_path("similarity", dir / "similarity.csv");
    } else if (*tc) {
      const auto cfg = load(common);
      EpochSet train = input_epochs(tc_epochs, cfg.train_dataset, cfg, common);
      const auto dir = out_dir(common, cfg, "train-classifier");
      staged("train-classifier", [&] {
        if (!tc_generated.empty()) train = concat(train, load_epochs(tc_generated));
        if (!tc_mask.empty()) train = pruning::apply_mask(train, read_mask(tc_mask));
        auto model = make_classifier(cfg);
        logger(fmt::format("[train-classifier] {} epochs x {} channels", train.count(), train.channels()));
        model->fit(train, stage_seed(master_seed(cfg), "classifier"));
        model->save(dir / model->file_name());
        print_path("classifier", dir / model->file_name());
      });
    } else if (*ev) {
      auto cfg = load(common);
      if (ev_level) cfg.metric_level = classifier::parse_metric_level(*ev_level);
      const auto ckpt = staged("evaluate", [&] { return classifier::load_checkpoint(ev_model); });
      const EpochSet test =
          input_epochs(ev_epochs, ev_dataset.empty() ? cfg.test_dataset : fs::path(ev_dataset), cfg, common);
      const auto dir = out_dir(common, cfg, "evaluate");
      const auto metrics = staged("evaluate", [&] {
        // Harmonise the test montage to the channels the classifier was trained on.
        const EpochSet masked = pruning::apply_mask(test, pruning::full_mask(ckpt.layout));
        return classifier::evaluate(ckpt, masked, cfg.metric_level);
      });
      const auto j = classifier::to_json(metrics);
      std::ofstream(dir / "metrics.json") << j.dump(2) << '\n';
      fmt::print("{}\n", j.dump(2));
      print_path("metrics", dir / "metrics.json");
    } else if (*run || *sw) {
      auto cfg = load(common);
      staged("config", [&] {
        if (!run_train.empty()) cfg.train_dataset = fs::absolute(run_train);
        if (!run_test.empty()) cfg.test_dataset = fs::absolute(run_test);
        if (run_mode) cfg.mode = parse_mode(*run_mode);
        cfg.validate();
      });
      RunOptions opts;
      opts.log = logger;
      const std::string& root = *run ? run_root : sw_root;
      if (!common.out_dir.empty()) opts.output_root = common.out_dir;
      if (!root.empty()) opts.output_root = root;
      if (*run) {
        const auto report = run_experiment(cfg, opts);
        fmt::print("accuracy {:.4f} +/- {:.4f}  f1 {:.4f} +/- {:.4f}\n", report.summary.accuracy_mean,
                   report.summary.accuracy_std, report.summary.f1_mean, report.summary.f1_std);
        print_path("report", report.run_dir / "report.json");
      } else {
        const auto report = sweep_delta(cfg, sw_deltas, opts);
        for (const auto& row : report.rows) {
          fmt::print("delta {:<5} accuracy {:.4f}  f1 {:.4f}\n", row.delta, row.summary.accuracy_mean,
                     row.summary.f1_mean);
        }
        print_path("sweep", report.run_dir / "sweep.csv");
        print_path("plot", report.run_dir / "sweep.svg");
      }
    }
  } catch (const QualityGateError& e) {
    std::cerr << "gepd: error: " << e.what() << '\n';
    return kExitQualityGate;
  } catch (const StageError& e) {
    std::cerr << "gepd: error: " << e.what() << '\n';
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "gepd: error: [" << app.get_subcommands().front()->get_name() << "] " << e.what() << '\n';
    return kExitStage;
  }
  return 0;
}
