#include "gepd/augment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "gepd/checkpoint.hpp"
#include "gepd/nn/optim.hpp"

namespace gepd::augment {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kSeedChannels = 64;
constexpr double kLeak = 0.2;

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Widths of the generator chain, input to output: L0, L1, L2, T.
std::array<std::size_t, 4> generator_widths(std::size_t samples) {
  std::array<std::size_t, 4> w{};
  w[3] = samples;
  for (std::size_t i = 3; i > 0; --i) w[i - 1] = w[i] / 2;
  return w;
}

nn::ConvGeometry critic_geometry() {
  nn::ConvGeometry g;
  g.kernel_w = 9;
  g.stride_w = 2;
  g.pad_left = g.pad_right = 4;
  return g;
}

}  // namespace

std::string to_string(Lipschitz mode) {
  return mode == Lipschitz::WeightClip ? "weight_clip" : "gradient_penalty";
}

Lipschitz parse_lipschitz(std::string_view text) {
  if (text == "weight_clip") return Lipschitz::WeightClip;
  if (text == "gradient_penalty") return Lipschitz::GradientPenalty;
  throw std::invalid_argument(fmt::format("unknown lipschitz mode '{}'", text));
}

void GanConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("gan config: " + m); };
  if (channels == 0) fail("channels must be positive");
  if (samples < 8) fail(fmt::format("samples {} cannot be reached by three stride-2 upsamplings (need >= 8)", samples));
  if (noise_dim == 0) fail("noise dimension must be positive");
  if (!(generator_lr > 0.0) || !(critic_lr > 0.0)) fail("learning rates must be positive");
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (critic_steps == 0) fail("critic_steps must be positive");
  if (window == 0) fail("window must be positive");
  if (lipschitz == Lipschitz::WeightClip && !(clip > 0.0)) fail("clip must be positive");
  if (lipschitz == Lipschitz::GradientPenalty && !(gp_lambda > 0.0)) fail("gp_lambda must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
}

nlohmann::json to_json(const GanConfig& c) {
  return {{"channels", c.channels},
          {"samples", c.samples},
          {"noise_dim", c.noise_dim},
          {"generator_lr", c.generator_lr},
          {"critic_lr", c.critic_lr},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lipschitz", to_string(c.lipschitz)},
          {"clip", c.clip},
          {"gp_lambda", c.gp_lambda},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"critic_steps", c.critic_steps},
          {"window", c.window},
          {"convergence_tol", c.convergence_tol},
          {"early_stop", c.early_stop}};
}

GanConfig gan_config_from_json(const nlohmann::json& j) {
  GanConfig c;
  c.channels = j.at("channels");
  c.samples = j.at("samples");
  c.noise_dim = j.at("noise_dim");
  c.generator_lr = j.at("generator_lr");
  c.critic_lr = j.at("critic_lr");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.lipschitz = parse_lipschitz(j.at("lipschitz").get<std::string>());
  c.clip = j.at("clip");
  c.gp_lambda = j.at("gp_lambda");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.critic_steps = j.at("critic_steps");
  c.window = j.at("window");
  c.convergence_tol = j.at("convergence_tol");
  c.early_stop = j.at("early_stop");
  return c;
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

Generator::Generator(const GanConfig& cfg, std::mt19937_64& rng) : channels_(cfg.channels), samples_(cfg.samples) {
  cfg.validate();
  const auto w = generator_widths(cfg.samples);
  net_.emplace<nn::Linear>(cfg.noise_dim, kSeedChannels * w[0], rng);
  net_.emplace<nn::LeakyRelu>(kLeak);
  net_.emplace<nn::Reshape>(Shape{kSeedChannels, 1, w[0]});
  const std::size_t chans[4] = {kSeedChannels, 32, 16, cfg.channels};
  for (std::size_t i = 0; i < 3; ++i) {
    net_.emplace<nn::ConvTranspose1d>(chans[i], chans[i + 1], 4, 2, 1, w[i + 1] % 2, rng);
    if (i < 2) net_.emplace<nn::LeakyRelu>(kLeak);
  }
  net_.emplace<nn::Cbam>(cfg.channels, 4, 7, true, rng);
  net_.emplace<nn::ScaledTanh>(kOutputScale);
}

Tensor Generator::forward(const Tensor& noise) {
  Tensor y = net_.forward(noise);
  y.reshape({noise.dim(0), channels_, samples_});
  return y;
}

Tensor Generator::backward(const Tensor& grad_output) {
  return net_.backward(grad_output.reshaped({grad_output.dim(0), channels_, 1, samples_}));
}

void Generator::collect_parameters(std::vector<nn::Parameter*>& out) { net_.collect_parameters(out); }

Critic::Critic(const GanConfig& cfg, std::mt19937_64& rng) : channels_(cfg.channels), samples_(cfg.samples) {
  cfg.validate();
  const auto g = critic_geometry();
  net_.emplace<nn::Conv2d>(cfg.channels, 16, g, true, rng);
  net_.emplace<nn::LeakyRelu>(kLeak);
  net_.emplace<nn::Conv2d>(16, 32, g, true, rng);
  net_.emplace<nn::LeakyRelu>(kLeak);
  net_.emplace<nn::Cbam>(32, 8, 7, true, rng);
  net_.emplace<nn::Flatten>();
  const std::size_t width = g.out_w(g.out_w(cfg.samples));
  net_.emplace<nn::Linear>(32 * width, 1, rng);
}

Tensor Critic::forward(const Tensor& input) {
  if (input.rank() != 3 || input.dim(1) != channels_ || input.dim(2) != samples_) {
    throw std::invalid_argument(fmt::format("critic: expected (B, {}, {}), got {}", channels_, samples_,
                                            shape_string(input.shape())));
  }
  input_shape_ = input.shape();
  Tensor y = net_.forward(input.reshaped({input.dim(0), channels_, 1, samples_}));
  y.reshape({input.dim(0)});
  return y;
}

Tensor Critic::backward(const Tensor& grad_output) {
  return net_.backward(grad_output.reshaped({grad_output.dim(0), 1})).reshaped(input_shape_);
}

void Critic::collect_parameters(std::vector<nn::Parameter*>& out) { net_.collect_parameters(out); }

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace {

double mean(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean of an empty batch");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double critic_loss(std::span<const double> real_scores, std::span<const double> fake_scores) {
  return mean(fake_scores) - mean(real_scores);
}

double generator_loss(std::span<const double> fake_scores) { return -mean(fake_scores); }

double gradient_penalty(std::span<const double> grad_norms, double lambda) {
  double s = 0.0;
  for (double n : grad_norms) s += (n - 1.0) * (n - 1.0);
  return lambda * s / static_cast<double>(std::max<std::size_t>(1, grad_norms.size()));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

Tensor sample_noise(std::size_t batch, std::size_t dim, std::mt19937_64& rng) {
  Tensor z({batch, dim});
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : z.values()) v = n(rng);
  return z;
}

std::vector<Tensor> grads_of(const std::vector<nn::Parameter*>& ps) {
  std::vector<Tensor> out;
  for (auto* p : ps) out.push_back(p->grad);
  return out;
}

}  // namespace

// The parameter gradient of lambda * mean((|g_i| - 1)^2), g_i = dD/dx at x_i,
// equals d/dtheta of sum_i v_i . g_i with v_i = 2 lambda (|g_i| - 1) g_i /
// (B |g_i|) held fixed. That directional derivative is taken by a central
// difference of parameter gradients at x +- eps v.
double accumulate_gradient_penalty(Critic& critic, const Tensor& interp, double lambda) {
  const auto params = critic.parameters();
  const std::size_t b = interp.dim(0), per = interp.size() / b;
  const Tensor ones({b}, 1.0);
  const auto saved = grads_of(params);

  critic.forward(interp);
  const Tensor g = critic.backward(ones);
  std::vector<double> norms(b);
  Tensor v(interp.shape());
  double vmax = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < per; ++k) s += g[i * per + k] * g[i * per + k];
    norms[i] = std::sqrt(s);
    const double scale = norms[i] > 0.0 ? 2.0 * lambda * (norms[i] - 1.0) / (static_cast<double>(b) * norms[i]) : 0.0;
    for (std::size_t k = 0; k < per; ++k) {
      v[i * per + k] = scale * g[i * per + k];
      vmax = std::max(vmax, std::abs(v[i * per + k]));
    }
  }
  const double eps = vmax > 0.0 ? 1e-4 / vmax : 0.0;

  for (auto* p : params) p->grad.fill(0.0);
  if (eps > 0.0) {
    Tensor xp = interp, xm = interp;
    for (std::size_t k = 0; k < v.size(); ++k) {
      xp[k] += eps * v[k];
      xm[k] -= eps * v[k];
    }
    critic.forward(xp);
    critic.backward(ones);
    const auto plus = grads_of(params);
    for (auto* p : params) p->grad.fill(0.0);
    critic.forward(xm);
    critic.backward(ones);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& gr = params[k]->grad;
      for (std::size_t i = 0; i < gr.size(); ++i) gr[i] = (plus[k][i] - gr[i]) / (2.0 * eps);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->grad += saved[k];
  return gradient_penalty(norms, lambda);
}

namespace {

bool finite(double v) { return std::isfinite(v); }

}  // namespace

GanCheckpoint train_gan(const EpochSet& real, GanConfig cfg, std::uint64_t seed, const GanEpochCallback& on_epoch) {
  if (real.count() == 0) throw DataError("train_gan: no real epochs");
  real.validate();
  if (real.count_where(std::nullopt, Provenance::Real) != real.count()) {
    throw DataError("train_gan: input must contain real epochs only");
  }
  const Label group = real.labels.front();
  if (real.count_where(group, std::nullopt) != real.count()) {
    throw DataError("train_gan: input must contain a single label group");
  }
  cfg.channels = real.channels();
  cfg.samples = real.samples();
  cfg.validate();

  std::mt19937_64 init_rng(mix(seed));
  Generator gen(cfg, init_rng);
  Critic critic(cfg, init_rng);
  const auto gparams = gen.parameters();
  const auto cparams = critic.parameters();
  nn::Adam gopt(gparams, {.lr = cfg.generator_lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2});
  nn::Adam copt(cparams, {.lr = cfg.critic_lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2});
  if (cfg.lipschitz == Lipschitz::WeightClip) nn::clip_parameters(cparams, cfg.clip);

  std::mt19937_64 rng(mix(seed + 1));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::size_t> order(real.count());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per = real.channels() * real.samples();

  GanCheckpoint ckpt;
  ckpt.config = cfg;
  ckpt.group = group;
  ckpt.layout = real.layout;
  ckpt.epoch_length_s = real.epoch_length_s;
  ckpt.sampling_rate = real.sampling_rate;

  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_state;
  std::size_t best_epoch = 0;
  std::optional<std::size_t> converged;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double c_sum = 0.0, w_sum = 0.0, g_sum = 0.0;
    std::size_t c_steps = 0, g_steps = 0;
    for (std::size_t start = 0, i = 0; start < order.size(); start += cfg.batch_size, ++i) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::size_t b = end - start;
      const std::span<const std::size_t> rows(order.data() + start, b);
      const Tensor real_batch = real.epochs.gather_rows(rows);

      // Critic step.
      const Tensor fake = gen.forward(sample_noise(b, cfg.noise_dim, rng));
      for (auto* p : cparams) p->grad.fill(0.0);
      double penalty = 0.0;
      if (cfg.lipschitz == Lipschitz::GradientPenalty) {
        Tensor interp(real_batch.shape());
        for (std::size_t s = 0; s < b; ++s) {
          const double u = unit(rng);
          for (std::size_t k = 0; k < per; ++k) {
            interp[s * per + k] = u * real_batch[s * per + k] + (1.0 - u) * fake[s * per + k];
          }
        }
        penalty = accumulate_gradient_penalty(critic, interp, cfg.gp_lambda);
      }
      const Tensor scores = critic.forward(concat_rows(real_batch, fake));
      const std::span<const double> all = scores.values();
      const auto real_scores = all.subspan(0, b), fake_scores = all.subspan(b, b);
      const double closs = critic_loss(real_scores, fake_scores) + penalty;
      if (!finite(closs)) {
        throw DivergenceError(fmt::format("critic loss became non-finite at epoch {} (critic lr {})", epoch, cfg.critic_lr));
      }
      Tensor dscore({2 * b});
      for (std::size_t s = 0; s < b; ++s) {
        dscore[s] = -1.0 / static_cast<double>(b);
        dscore[b + s] = 1.0 / static_cast<double>(b);
      }
      critic.backward(dscore);
      copt.step();
      if (cfg.lipschitz == Lipschitz::WeightClip) nn::clip_parameters(cparams, cfg.clip);
      c_sum += closs;
      w_sum += -critic_loss(real_scores, fake_scores);
      ++c_steps;

      // Generator step every critic_steps critic updates.
      if (i % cfg.critic_steps == 0) {
        for (auto* p : gparams) p->grad.fill(0.0);
        const Tensor gfake = gen.forward(sample_noise(cfg.batch_size, cfg.noise_dim, rng));
        const Tensor s = critic.forward(gfake);
        const double gloss = generator_loss(s.values());
        if (!finite(gloss)) {
          throw DivergenceError(
              fmt::format("generator loss became non-finite at epoch {} (generator lr {})", epoch, cfg.generator_lr));
        }
        const Tensor ds({cfg.batch_size}, -1.0 / static_cast<double>(cfg.batch_size));
        gen.backward(critic.backward(ds));
        gopt.step();
        g_sum += gloss;
        ++g_steps;
      }
    }
    const double c_mean = c_sum / static_cast<double>(c_steps);
    const double w_mean = w_sum / static_cast<double>(c_steps);
    const double g_mean = g_sum / static_cast<double>(g_steps);
    ckpt.curves.critic_loss.push_back(c_mean);
    ckpt.curves.wasserstein.push_back(w_mean);
    ckpt.curves.generator_loss.push_back(g_mean);
    if (on_epoch) on_epoch(epoch, c_mean, w_mean, g_mean);

    const auto& cl = ckpt.curves.critic_loss;
    if (!converged && cl.size() >= 2 * cfg.window) {
      const auto it = cl.end();
      const double cur = std::accumulate(it - static_cast<std::ptrdiff_t>(cfg.window), it, 0.0);
      const double prev = std::accumulate(it - 2 * static_cast<std::ptrdiff_t>(cfg.window),
                                          it - static_cast<std::ptrdiff_t>(cfg.window), 0.0);
      if (std::abs(cur - prev) < cfg.convergence_tol * std::max(std::abs(prev), 1e-12)) converged = epoch;
    }
    // Selection window: after convergence, or the final window of the run.
    const bool selecting = converged ? epoch >= *converged : epoch + cfg.window >= cfg.epochs;
    if (selecting && g_mean < best) {
      best = g_mean;
      best_epoch = epoch;
      best_state = checkpoint::snapshot(gen);
    }
    if (converged && cfg.early_stop && epoch >= *converged + cfg.window) break;
  }

  ckpt.selection_generator_loss = best;
  ckpt.selected_epoch = best_epoch;
  ckpt.converged_epoch = converged;
  ckpt.generator_state = best_state.empty() ? checkpoint::snapshot(gen) : best_state;
  ckpt.critic_state = checkpoint::snapshot(critic);
  return ckpt;
}

// ---------------------------------------------------------------------------
// Generation and fusion
// ---------------------------------------------------------------------------

EpochSet generate(const GanCheckpoint& ckpt, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 init(0);
  Generator gen(ckpt.config, init);
  checkpoint::restore(gen, ckpt.generator_state);
  gen.set_training(false);

  EpochSet out;
  out.layout = ckpt.layout;
  out.epoch_length_s = ckpt.epoch_length_s;
  out.sampling_rate = ckpt.sampling_rate;
  out.epochs = Tensor({count, ckpt.config.channels, ckpt.config.samples});
  std::mt19937_64 rng(mix(seed));
  const std::size_t per = ckpt.config.channels * ckpt.config.samples;
  for (std::size_t start = 0; start < count; start += ckpt.config.batch_size) {
    const std::size_t b = std::min(ckpt.config.batch_size, count - start);
    const Tensor y = gen.forward(sample_noise(b, ckpt.config.noise_dim, rng));
    std::copy(y.values().begin(), y.values().end(), out.epochs.data() + start * per);
  }
  out.labels.assign(count, ckpt.group);
  out.provenance.assign(count, Provenance::Generated);
  out.subjects.assign(count, "generated-" + to_string(ckpt.group));
  return out;
}

EpochSet generate_for(const EpochSet& real, const GanCheckpoint& hc, const GanCheckpoint& pd, const FusionSpec& spec) {
  if (!(spec.delta > 0.0)) throw std::invalid_argument("fusion delta must be positive");
  if (hc.group != Label::HC || pd.group != Label::PD) throw DataError("fuse: checkpoints must be HC and PD respectively");
  for (const GanCheckpoint* c : {&hc, &pd}) {
    if (c->layout.names != real.layout.names || c->config.samples != real.samples()) {
      throw DataError(fmt::format("fuse: {} checkpoint shape ({} x {}) does not match real data ({} x {})",
                                  to_string(c->group), c->layout.size(), c->config.samples, real.channels(),
                                  real.samples()));
    }
  }
  const auto n_hc = static_cast<std::size_t>(
      std::llround(spec.delta * static_cast<double>(real.count_where(Label::HC, std::nullopt))));
  const auto n_pd = static_cast<std::size_t>(
      std::llround(spec.delta * static_cast<double>(real.count_where(Label::PD, std::nullopt))));
  EpochSet out = real.empty_like();
  if (n_hc) out = concat(out, generate(hc, n_hc, mix(spec.seed ^ 0x4843ULL)));
  if (n_pd) out = concat(out, generate(pd, n_pd, mix(spec.seed ^ 0x5044ULL)));
  return out;
}

EpochSet fuse(const EpochSet& real, const GanCheckpoint& hc, const GanCheckpoint& pd, const FusionSpec& spec) {
  const EpochSet generated = generate_for(real, hc, pd, spec);
  if (generated.count() == 0) return real;
  return concat(real, generated);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const fs::path& path, const GanCheckpoint& ckpt) {
  checkpoint::Container c;
  c.header = {{"kind", "pd-wgan"},
              {"config", to_json(ckpt.config)},
              {"group", to_string(ckpt.group)},
              {"channels", ckpt.layout.names},
              {"epoch_length_s", ckpt.epoch_length_s},
              {"sampling_rate", ckpt.sampling_rate},
              {"selected_epoch", ckpt.selected_epoch},
              {"converged_epoch", ckpt.converged_epoch ? nlohmann::json(*ckpt.converged_epoch) : nlohmann::json()}};
  if (ckpt.layout.reference) c.header["reference"] = *ckpt.layout.reference;
  c.put("selection_generator_loss", Tensor({1}, std::vector<double>{ckpt.selection_generator_loss}));
  c.put("curve.critic_loss", checkpoint::vector_tensor(ckpt.curves.critic_loss));
  c.put("curve.wasserstein", checkpoint::vector_tensor(ckpt.curves.wasserstein));
  c.put("curve.generator_loss", checkpoint::vector_tensor(ckpt.curves.generator_loss));
  for (std::size_t i = 0; i < ckpt.generator_state.size(); ++i) c.put(fmt::format("generator.{}", i), ckpt.generator_state[i]);
  for (std::size_t i = 0; i < ckpt.critic_state.size(); ++i) c.put(fmt::format("critic.{}", i), ckpt.critic_state[i]);
  checkpoint::save(path, c);
}

GanCheckpoint load_checkpoint(const fs::path& path) {
  const auto c = checkpoint::load(path);
  if (c.header.value("kind", "") != "pd-wgan") {
    throw std::runtime_error(fmt::format("'{}' is not a GAN checkpoint", path.string()));
  }
  GanCheckpoint ckpt;
  ckpt.config = gan_config_from_json(c.header.at("config"));
  ckpt.group = parse_label(c.header.at("group").get<std::string>());
  ckpt.layout.names = c.header.at("channels").get<std::vector<std::string>>();
  if (c.header.contains("reference")) ckpt.layout.reference = c.header.at("reference").get<std::string>();
  ckpt.epoch_length_s = c.header.at("epoch_length_s");
  ckpt.sampling_rate = c.header.at("sampling_rate");
  ckpt.selected_epoch = c.header.at("selected_epoch");
  if (!c.header.at("converged_epoch").is_null()) ckpt.converged_epoch = c.header.at("converged_epoch").get<std::size_t>();
  ckpt.selection_generator_loss = c.tensor("selection_generator_loss")[0];
  ckpt.curves.critic_loss = checkpoint::tensor_vector(c.tensor("curve.critic_loss"));
  ckpt.curves.wasserstein = checkpoint::tensor_vector(c.tensor("curve.wasserstein"));
  ckpt.curves.generator_loss = checkpoint::tensor_vector(c.tensor("curve.generator_loss"));
  for (std::size_t i = 0; c.has(fmt::format("generator.{}", i)); ++i) ckpt.generator_state.push_back(c.tensor(fmt::format("generator.{}", i)));
  for (std::size_t i = 0; c.has(fmt::format("critic.{}", i)); ++i) ckpt.critic_state.push_back(c.tensor(fmt::format("critic.{}", i)));
  std::mt19937_64 init(0);
  Generator gen(ckpt.config, init);
  checkpoint::restore(gen, ckpt.generator_state);
  Critic critic(ckpt.config, init);
  checkpoint::restore(critic, ckpt.critic_state);
  return ckpt;
}

}  // namespace gepd::augment
