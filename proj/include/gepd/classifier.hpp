#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gepd/nn/conv.hpp"
#include "gepd/nn/layers.hpp"
#include "gepd/types.hpp"

namespace gepd::classifier {

struct PdnexConfig {
  std::size_t n_channels = 38;
  std::size_t n_samples = 2500;
  std::size_t batch_size = 8;
  double dropout = 0.6;
  std::size_t dilation1 = 2;
  std::size_t dilation2 = 4;
  std::size_t n_classes = 2;

  // Throws std::invalid_argument on zero sizes, dropout outside [0, 1),
  // zero dilation or fewer than 64 samples.
  void validate() const;
  // Time width after the three 1x4 pools.
  std::size_t pooled_width() const { return n_samples / 64; }
  std::size_t flattened_width() const { return 2 * pooled_width(); }
};

struct TrainConfig {
  std::size_t epochs = 100;
  double lr_start = 1e-3;
  double lr_end = 1e-4;
  double l1_coeff = 1e-4;
  double l2_coeff = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
};

// Valid, unpadded convolutions on (N, C, H, W) inputs.
// depthwise_conv: kernel (C_out, C_in / groups, kh, kw); no mixing across groups.
Tensor depthwise_conv(const Tensor& input, const Tensor& kernel, std::size_t groups);
// dilated_conv: kernel (C_out, C_in, kh, kw) sampled every `dilation` positions on both axes.
Tensor dilated_conv(const Tensor& input, const Tensor& kernel, std::size_t dilation);

// Input (B, N, M) or (B, 1, N, M); output logits (B, n_classes).
class Pdnex : public nn::Module {
 public:
  Pdnex(const PdnexConfig& cfg, std::uint64_t seed);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<nn::Parameter*>& out) override;
  void collect_buffers(std::vector<Tensor*>& out) override;
  void set_training(bool training) override;

  // Output of the stack after `blocks` of the seven blocks (0 returns the
  // reshaped input). Used to inspect intermediate shapes.
  Tensor forward_blocks(const Tensor& input, std::size_t blocks);
  void reseed_dropout(std::uint64_t seed);
  const PdnexConfig& config() const { return cfg_; }

 private:
  PdnexConfig cfg_;
  std::vector<std::unique_ptr<nn::Sequential>> blocks_;
  std::vector<nn::Dropout*> dropouts_;
  Shape input_shape_;
};

struct ClassifierCheckpoint {
  PdnexConfig config;
  TrainConfig train;
  ChannelLayout layout;
  double epoch_length_s = 0.0;
  double sampling_rate = 0.0;
  std::vector<double> loss_curve;      // mean training loss per epoch
  std::vector<double> accuracy_curve;  // training-mode accuracy per epoch
  std::vector<double> lr_curve;
  std::vector<Tensor> state;
};

using EpochCallback = std::function<void(std::size_t epoch, double loss, double accuracy)>;

// Adam with cosine-annealed learning rate, cross-entropy plus L1/L2 weight
// penalties. Throws DataError on single-class or empty data and
// DivergenceError on a non-finite loss.
ClassifierCheckpoint train_classifier(const EpochSet& data, PdnexConfig cfg, const TrainConfig& tcfg,
                                      const EpochCallback& on_epoch = {});

std::unique_ptr<Pdnex> restore_model(const ClassifierCheckpoint& ckpt);

// Logits in evaluation mode, batched by the configured batch size.
Tensor predict_logits(const ClassifierCheckpoint& ckpt, const EpochSet& data);
Tensor predict_logits(Pdnex& model, const EpochSet& data);

enum class MetricLevel { Epoch, SubjectMajority };
std::string to_string(MetricLevel level);
MetricLevel parse_metric_level(std::string_view text);

// Positive class is PD.
struct Confusion {
  std::size_t tp = 0;
  std::size_t fn = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t total() const { return tp + fn + fp + tn; }
};

struct Metrics {
  double accuracy = 0.0;
  double f1 = 0.0;
  Confusion confusion;
  MetricLevel level = MetricLevel::Epoch;
};

Metrics metrics_from_confusion(const Confusion& c, MetricLevel level = MetricLevel::Epoch);
// truth and predicted hold 0 (HC) or 1 (PD).
Metrics metrics_from_predictions(std::span<const int> truth, std::span<const int> predicted);
// Majority vote per subject; ties go to the class with the larger mean
// probability over the subject's epochs.
Metrics subject_majority(std::span<const std::string> subjects, std::span<const int> truth,
                         const Tensor& probabilities);

Metrics evaluate(const ClassifierCheckpoint& ckpt, const EpochSet& data,
                 MetricLevel level = MetricLevel::Epoch);
// Metrics from precomputed logits.
Metrics evaluate_logits(const Tensor& logits, const EpochSet& data, MetricLevel level);

nlohmann::json to_json(const PdnexConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const Metrics& m);
PdnexConfig pdnex_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const ClassifierCheckpoint& ckpt);
ClassifierCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gepd::classifier
