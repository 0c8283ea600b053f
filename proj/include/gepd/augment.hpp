#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gepd/nn/cbam.hpp"
#include "gepd/nn/conv.hpp"
#include "gepd/nn/layers.hpp"
#include "gepd/types.hpp"

namespace gepd::augment {

enum class Lipschitz { WeightClip, GradientPenalty };
std::string to_string(Lipschitz mode);
Lipschitz parse_lipschitz(std::string_view text);

struct GanConfig {
  std::size_t channels = 60;
  std::size_t samples = 2500;
  std::size_t noise_dim = 128;
  double generator_lr = 1e-3;
  double critic_lr = 1e-4;
  std::size_t epochs = 2000;
  std::size_t batch_size = 8;
  Lipschitz lipschitz = Lipschitz::WeightClip;
  double clip = 0.01;
  double gp_lambda = 10.0;
  double beta1 = 0.5;
  double beta2 = 0.9;
  std::size_t critic_steps = 5;
  // Convergence proxy: relative change between consecutive windows of mean critic loss.
  std::size_t window = 50;
  double convergence_tol = 0.01;
  // Stop one window after convergence instead of running all epochs.
  bool early_stop = true;

  void validate() const;
};

nlohmann::json to_json(const GanConfig& c);
GanConfig gan_config_from_json(const nlohmann::json& j);

// noise (B, d) -> Linear -> LeakyReLU -> (B, 64, 1, L0) -> three stride-2
// transposed convolutions (64 -> 32 -> 16 -> C) -> CBAM -> 4 tanh -> (B, C, T).
class Generator : public nn::Module {
 public:
  Generator(const GanConfig& cfg, std::mt19937_64& rng);

  Tensor forward(const Tensor& noise) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<nn::Parameter*>& out) override;

  static constexpr double kOutputScale = 4.0;

 private:
  std::size_t channels_, samples_;
  nn::Sequential net_;
};

// (B, C, T) -> conv 1x9 stride 2 (C -> 16) -> LeakyReLU -> conv 1x9 stride 2
// (16 -> 32) -> LeakyReLU -> CBAM -> Linear -> (B,) unbounded scores.
class Critic : public nn::Module {
 public:
  Critic(const GanConfig& cfg, std::mt19937_64& rng);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<nn::Parameter*>& out) override;

 private:
  std::size_t channels_, samples_;
  nn::Sequential net_;
  Shape input_shape_;
};

// mean(fake) - mean(real)
double critic_loss(std::span<const double> real_scores, std::span<const double> fake_scores);
// -mean(fake)
double generator_loss(std::span<const double> fake_scores);
// lambda * mean((norm - 1)^2)
double gradient_penalty(std::span<const double> grad_norms, double lambda);

// Evaluates the penalty at `interp` (B, C, T) and adds its parameter gradient
// to the critic's accumulated gradients. Returns the penalty value.
double accumulate_gradient_penalty(Critic& critic, const Tensor& interp, double lambda);

struct GanCurves {
  std::vector<double> critic_loss;  // per epoch, mean over critic steps, penalty included
  std::vector<double> wasserstein;  // per epoch, mean(real) - mean(fake) scores
  std::vector<double> generator_loss;
};

struct GanCheckpoint {
  GanConfig config;
  Label group = Label::HC;
  ChannelLayout layout;
  double epoch_length_s = 0.0;
  double sampling_rate = 0.0;
  double selection_generator_loss = 0.0;
  std::size_t selected_epoch = 0;
  std::optional<std::size_t> converged_epoch;
  GanCurves curves;
  std::vector<Tensor> generator_state;
  std::vector<Tensor> critic_state;
};

using GanEpochCallback = std::function<void(std::size_t epoch, double critic, double wasserstein, double generator)>;

// Trains one WGAN on a single-label set of real epochs. The returned
// generator is the snapshot with minimal generator loss after the critic
// loss converges, or within the final window when it never does. Throws
// DataError on mixed or generated input and DivergenceError on a
// non-finite loss.
GanCheckpoint train_gan(const EpochSet& real, GanConfig cfg, std::uint64_t seed,
                        const GanEpochCallback& on_epoch = {});

// `count` generated epochs labelled with the checkpoint's group.
EpochSet generate(const GanCheckpoint& ckpt, std::size_t count, std::uint64_t seed);

struct FusionSpec {
  double delta = 1.0;
  std::uint64_t seed = 0;
};

// real followed by round(delta * n_HC) generated HC and round(delta * n_PD)
// generated PD epochs. Real epochs are copied unchanged.
EpochSet fuse(const EpochSet& real, const GanCheckpoint& hc, const GanCheckpoint& pd, const FusionSpec& spec);

// Generated epochs only, as fuse() would append them.
EpochSet generate_for(const EpochSet& real, const GanCheckpoint& hc, const GanCheckpoint& pd,
                      const FusionSpec& spec);

void save_checkpoint(const std::filesystem::path& path, const GanCheckpoint& ckpt);
GanCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gepd::augment
