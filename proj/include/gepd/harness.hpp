#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gepd/augment.hpp"
#include "gepd/classifier.hpp"
#include "gepd/dataio.hpp"
#include "gepd/pruning.hpp"
#include "gepd/quality.hpp"

namespace gepd::harness {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

// A pipeline failure tagged with the stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// The generated data failed the quality gate in strict mode.
class QualityGateError : public StageError {
 public:
  QualityGateError(double mean_score, double threshold);
  double mean_score() const { return mean_score_; }

 private:
  double mean_score_;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Mode { SingleDataset, CrossDataset };
std::string to_string(Mode m);
Mode parse_mode(std::string_view text);

enum class GateMode { Off, Warn, Strict };
std::string to_string(GateMode m);
GateMode parse_gate_mode(std::string_view text);

struct ExperimentConfig {
  std::string name = "experiment";
  Mode mode = Mode::CrossDataset;
  std::filesystem::path train_dataset;
  std::filesystem::path test_dataset;
  bool use_fusion = true;
  double delta = 1.7;
  bool use_pruning = true;
  std::vector<std::uint64_t> seeds{0};
  // Fraction of subjects per class held out in single-dataset mode.
  double test_fraction = 0.1;
  classifier::MetricLevel metric_level = classifier::MetricLevel::Epoch;
  std::string classifier = "pdnex";
  bool write_images = true;

  dataio::PreprocessConfig preprocess;
  augment::GanConfig gan;
  quality::AutoencoderConfig autoencoder;
  GateMode quality_gate = GateMode::Warn;
  std::size_t quality_bins = 20;
  pruning::PruneConfig prune;
  pruning::HistogramSpec histogram;
  classifier::PdnexConfig pdnex;
  classifier::TrainConfig train;
  // Used only by the synth subcommand.
  dataio::SynthSpec synth;

  // Throws std::invalid_argument on inconsistent settings.
  void validate() const;
};

// INI sections: [experiment], [preprocess], [gan], [quality], [pruning],
// [classifier], [synth]. Missing keys keep their defaults; unknown keys are errors.
// Relative dataset paths resolve against `base_dir`.
ExperimentConfig parse_config(const std::string& ini_text, const std::filesystem::path& base_dir = {});
// Applies "section.key=value" overrides on top of the file contents.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
ExperimentConfig apply_overrides(const ExperimentConfig& cfg, const std::vector<std::string>& overrides);
// Every key with its current value.
std::string format_config(const ExperimentConfig& cfg);
nlohmann::json to_json(const ExperimentConfig& cfg);

// Independent stream for one stage of one seed.
std::uint64_t stage_seed(std::uint64_t master, std::string_view stage);

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

void save_epochs(const std::filesystem::path& path, const EpochSet& e);
EpochSet load_epochs(const std::filesystem::path& path);

void write_mask(const std::filesystem::path& path, const pruning::ChannelMask& mask);
pruning::ChannelMask read_mask(const std::filesystem::path& path);

// Next unused <root>/<name>/run-NNN, created on return.
std::filesystem::path next_run_dir(const std::filesystem::path& root, const std::string& name);
// $GEPD_OUTPUT_ROOT when set, otherwise ./runs.
std::filesystem::path default_output_root();

// ---------------------------------------------------------------------------
// Pluggable classifiers
// ---------------------------------------------------------------------------

class ClassifierBackend {
 public:
  virtual ~ClassifierBackend() = default;
  virtual void fit(const EpochSet& train, std::uint64_t seed) = 0;
  // (N, 2) logits, column 1 is PD.
  virtual Tensor predict_logits(const EpochSet& data) = 0;
  virtual void save(const std::filesystem::path& path) const = 0;
  virtual std::string file_name() const = 0;
};

using BackendFactory = std::function<std::unique_ptr<ClassifierBackend>(const ExperimentConfig&)>;

void register_classifier(const std::string& name, BackendFactory factory);
std::unique_ptr<ClassifierBackend> make_classifier(const ExperimentConfig& cfg);
std::vector<std::string> classifier_names();

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct RunOptions {
  std::optional<std::filesystem::path> output_root;
  dataio::AccessLog* access_log = nullptr;
  // Progress lines ("[stage] message").
  std::function<void(const std::string&)> log;
};

struct SeedResult {
  std::uint64_t seed = 0;
  classifier::Metrics metrics;
  std::size_t train_epochs = 0;
  std::size_t generated_epochs = 0;
  std::size_t test_epochs = 0;
  std::vector<std::string> channels;
  std::optional<double> quality_mean;
  std::optional<quality::Verdict> quality_verdict;
  std::map<std::string, std::string> artifacts;  // relative to the run directory
};

struct Summary {
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
  double f1_mean = 0.0;
  double f1_std = 0.0;
};

// Population standard deviation over seeds.
Summary summarize(const std::vector<SeedResult>& results);

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<SeedResult> seeds;
  Summary summary;
  std::vector<std::string> warnings;
  std::map<std::string, std::string> artifacts;
  std::map<std::string, double> timings_s;
  std::filesystem::path run_dir;
};

// Report body without timings; identical configs and seeds give identical bodies.
nlohmann::json to_json(const ExperimentReport& r);

// Fig. 1 order per seed: preprocess -> GANs -> generate -> quality gate ->
// fuse -> similarity and prune -> classifier -> evaluate. In cross-dataset
// mode the test manifest is opened only in the evaluate stage. Writes
// report.json, timings.json, metrics.csv and config.ini into a fresh run
// directory.
ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

struct SweepRow {
  double delta = 0.0;
  std::vector<SeedResult> seeds;
  Summary summary;
};

struct SweepReport {
  ExperimentConfig config;
  std::vector<SweepRow> rows;
  std::vector<std::string> warnings;
  std::filesystem::path run_dir;
};

nlohmann::json to_json(const SweepReport& r);

// One classifier run per delta and seed, reusing one pair of GANs per seed.
// Writes sweep.csv (one row per delta), sweep_seeds.csv, sweep.svg and
// report.json.
SweepReport sweep_delta(const ExperimentConfig& cfg, const std::vector<double>& deltas,
                        const RunOptions& options = {});

// Line plot of mean accuracy and F1 against delta.
void write_sweep_svg(const std::filesystem::path& path, const SweepReport& r);

}  // namespace gepd::harness
