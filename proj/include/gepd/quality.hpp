#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gepd/nn/lstm.hpp"
#include "gepd/types.hpp"

namespace gepd::quality {

struct AutoencoderConfig {
  std::size_t hidden_size = 64;
  std::size_t epochs = 200;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  // Transition point of the smooth-L1 loss.
  double beta = 1.0;

  void validate() const;
};

nlohmann::json to_json(const AutoencoderConfig& c);
AutoencoderConfig autoencoder_config_from_json(const nlohmann::json& j);

// (B, C, T) channel-major epochs to (B, T, C) time-major sequences and back.
Tensor to_time_major(const Tensor& epochs);
Tensor to_channel_major(const Tensor& sequences);

// Time-major (B, T, C): BiLSTM (C -> 2H), LSTM (2H -> H), per-step Linear (H -> C).
class Autoencoder : public nn::Module {
 public:
  Autoencoder(std::size_t channels, const AutoencoderConfig& cfg, std::mt19937_64& rng);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<nn::Parameter*>& out) override;

  // Encoder output (B, T, 2H).
  Tensor encode(const Tensor& input);

 private:
  std::size_t channels_;
  nn::BiLstm encoder_;
  nn::Lstm decoder_;
  nn::TimeDistributedLinear output_;
};

struct AutoencoderCheckpoint {
  AutoencoderConfig config;
  ChannelLayout layout;
  std::size_t samples = 0;
  std::vector<double> loss_curve;
  std::vector<Tensor> state;
};

using AutoencoderEpochCallback = std::function<void(std::size_t epoch, double loss)>;

// Minimises mean smooth-L1 reconstruction loss with Adam. Throws DataError on
// empty or non-real input and DivergenceError on a non-finite loss.
AutoencoderCheckpoint train_autoencoder(const EpochSet& real, const AutoencoderConfig& cfg, std::uint64_t seed,
                                        const AutoencoderEpochCallback& on_epoch = {});

// Mean smooth-L1 reconstruction loss of every epoch.
std::vector<double> reconstruction_losses(const AutoencoderCheckpoint& ckpt, const EpochSet& data);

// Loss-to-score map: score = clamp(1 - (loss - lo) / (hi - lo), 0, 1) with lo
// the smallest calibration loss and hi a multiple of the calibration median.
struct Calibration {
  double lo = 0.0;
  double hi = 1.0;
  double median = 0.0;
  double anchor_multiple = 3.0;

  double score(double loss) const;
};

Calibration calibrate(std::vector<double> calibration_losses, double anchor_multiple = 3.0);

enum class Verdict { Good, Poor, Indeterminate };
std::string to_string(Verdict v);
Verdict parse_verdict(std::string_view text);

inline constexpr double kGoodThreshold = 0.65;
inline constexpr double kPoorThreshold = 0.5;

// Good iff mean > 0.65, poor iff mean < 0.5.
Verdict verdict_for(double mean_score);

struct QualityReport {
  std::vector<double> losses;
  std::vector<double> scores;
  double mean_score = 0.0;
  // Equal-width bins over [0, 1]; a score of exactly 1 lands in the last bin.
  std::vector<std::size_t> histogram;
  Verdict verdict = Verdict::Indeterminate;
  Calibration calibration;
};

QualityReport make_report(std::vector<double> losses, const Calibration& calibration, std::size_t bins = 20);

// Scores `data` against the reconstruction losses of `calibration`. Throws
// DataError when either set is empty or shapes do not match the checkpoint.
QualityReport score(const AutoencoderCheckpoint& ckpt, const EpochSet& data, const EpochSet& calibration,
                    std::size_t bins = 20);

nlohmann::json to_json(const QualityReport& r);
QualityReport report_from_json(const nlohmann::json& j);

void write_report(const std::filesystem::path& path, const QualityReport& r);
QualityReport read_report(const std::filesystem::path& path);
// Bar chart of the score histogram with the two verdict thresholds marked.
void write_histogram_svg(const std::filesystem::path& path, const QualityReport& r, const std::string& title = "");

void save_checkpoint(const std::filesystem::path& path, const AutoencoderCheckpoint& ckpt);
AutoencoderCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gepd::quality
