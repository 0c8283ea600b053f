#include "gepd/quality.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "gepd/checkpoint.hpp"
#include "gepd/nn/optim.hpp"

namespace gepd::quality {

namespace fs = std::filesystem;

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double smooth_l1_value(double diff, double beta) {
  const double a = std::abs(diff);
  return a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
}

}  // namespace

void AutoencoderConfig::validate() const {
  if (hidden_size == 0) throw std::invalid_argument("autoencoder: hidden_size must be positive");
  if (epochs == 0) throw std::invalid_argument("autoencoder: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("autoencoder: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("autoencoder: learning_rate must be positive");
  if (!(beta > 0.0)) throw std::invalid_argument("autoencoder: beta must be positive");
}

nlohmann::json to_json(const AutoencoderConfig& c) {
  return {{"hidden_size", c.hidden_size},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"beta", c.beta}};
}

AutoencoderConfig autoencoder_config_from_json(const nlohmann::json& j) {
  AutoencoderConfig c;
  c.hidden_size = j.at("hidden_size");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.learning_rate = j.at("learning_rate");
  c.beta = j.value("beta", 1.0);
  return c;
}

Tensor to_time_major(const Tensor& epochs) {
  if (epochs.rank() != 3) throw std::invalid_argument("to_time_major: expected (B, C, T)");
  const std::size_t b = epochs.dim(0), c = epochs.dim(1), t = epochs.dim(2);
  Tensor out({b, t, c});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t s = 0; s < t; ++s) out[(n * t + s) * c + ch] = epochs[(n * c + ch) * t + s];
    }
  }
  return out;
}

Tensor to_channel_major(const Tensor& sequences) {
  if (sequences.rank() != 3) throw std::invalid_argument("to_channel_major: expected (B, T, C)");
  const std::size_t b = sequences.dim(0), t = sequences.dim(1), c = sequences.dim(2);
  Tensor out({b, c, t});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t s = 0; s < t; ++s) {
      for (std::size_t ch = 0; ch < c; ++ch) out[(n * c + ch) * t + s] = sequences[(n * t + s) * c + ch];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Autoencoder::Autoencoder(std::size_t channels, const AutoencoderConfig& cfg, std::mt19937_64& rng)
    : channels_(channels),
      encoder_(channels, cfg.hidden_size, rng),
      decoder_(2 * cfg.hidden_size, cfg.hidden_size, false, rng),
      output_(cfg.hidden_size, channels, rng) {
  if (channels == 0) throw std::invalid_argument("autoencoder: channels must be positive");
  cfg.validate();
}

Tensor Autoencoder::forward(const Tensor& input) {
  if (input.rank() != 3 || input.dim(2) != channels_) {
    throw std::invalid_argument(
        fmt::format("autoencoder: expected (B, T, {}), got {}", channels_, shape_string(input.shape())));
  }
  return output_.forward(decoder_.forward(encoder_.forward(input)));
}

Tensor Autoencoder::backward(const Tensor& grad_output) {
  return encoder_.backward(decoder_.backward(output_.backward(grad_output)));
}

void Autoencoder::collect_parameters(std::vector<nn::Parameter*>& out) {
  encoder_.collect_parameters(out);
  decoder_.collect_parameters(out);
  output_.collect_parameters(out);
}

Tensor Autoencoder::encode(const Tensor& input) { return encoder_.forward(input); }

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

AutoencoderCheckpoint train_autoencoder(const EpochSet& real, const AutoencoderConfig& cfg, std::uint64_t seed,
                                        const AutoencoderEpochCallback& on_epoch) {
  cfg.validate();
  if (real.count() == 0) throw DataError("train_autoencoder: no epochs");
  real.validate();
  if (real.count_where(std::nullopt, Provenance::Real) != real.count()) {
    throw DataError("train_autoencoder: input must contain real epochs only");
  }
  std::mt19937_64 init(mix(seed));
  Autoencoder model(real.channels(), cfg, init);
  const auto params = model.parameters();
  nn::Adam opt(params, {.lr = cfg.learning_rate});
  std::mt19937_64 shuffle(mix(seed + 1));
  std::vector<std::size_t> order(real.count());
  std::iota(order.begin(), order.end(), 0);

  AutoencoderCheckpoint ckpt;
  ckpt.config = cfg;
  ckpt.layout = real.layout;
  ckpt.samples = real.samples();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle);
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const Tensor x = to_time_major(real.epochs.gather_rows(rows));
      opt.zero_grad();
      const auto loss = nn::smooth_l1(model.forward(x), x, cfg.beta);
      if (!std::isfinite(loss.value)) {
        throw DivergenceError(
            fmt::format("autoencoder loss became non-finite at epoch {} (lr {})", epoch, cfg.learning_rate));
      }
      model.backward(loss.grad);
      opt.step();
      sum += loss.value * static_cast<double>(rows.size());
    }
    const double mean = sum / static_cast<double>(order.size());
    ckpt.loss_curve.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  ckpt.state = checkpoint::snapshot(model);
  return ckpt;
}

std::vector<double> reconstruction_losses(const AutoencoderCheckpoint& ckpt, const EpochSet& data) {
  if (data.count() == 0) throw DataError("reconstruction_losses: no epochs");
  if (data.layout.names != ckpt.layout.names || data.samples() != ckpt.samples) {
    throw DataError(fmt::format("quality: data shape ({} x {}) does not match the autoencoder ({} x {})",
                                data.channels(), data.samples(), ckpt.layout.size(), ckpt.samples));
  }
  std::mt19937_64 init(0);
  Autoencoder model(data.channels(), ckpt.config, init);
  checkpoint::restore(model, ckpt.state);
  model.set_training(false);

  const std::size_t per = data.channels() * data.samples();
  std::vector<double> losses;
  losses.reserve(data.count());
  for (std::size_t start = 0; start < data.count(); start += ckpt.config.batch_size) {
    const std::size_t end = std::min(data.count(), start + ckpt.config.batch_size);
    const Tensor x = to_time_major(data.epochs.slice_rows(start, end));
    const Tensor y = model.forward(x);
    for (std::size_t n = 0; n < end - start; ++n) {
      double s = 0.0;
      for (std::size_t k = 0; k < per; ++k) s += smooth_l1_value(y[n * per + k] - x[n * per + k], ckpt.config.beta);
      losses.push_back(s / static_cast<double>(per));
    }
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

double Calibration::score(double loss) const {
  if (hi - lo <= 0.0) return loss <= lo ? 1.0 : 0.0;
  return std::clamp(1.0 - (loss - lo) / (hi - lo), 0.0, 1.0);
}

Calibration calibrate(std::vector<double> losses, double anchor_multiple) {
  if (losses.empty()) throw DataError("calibrate: no calibration losses");
  if (!(anchor_multiple > 1.0)) throw std::invalid_argument("calibrate: anchor multiple must exceed 1");
  std::sort(losses.begin(), losses.end());
  const std::size_t n = losses.size();
  Calibration c;
  c.median = n % 2 ? losses[n / 2] : 0.5 * (losses[n / 2 - 1] + losses[n / 2]);
  c.lo = losses.front();
  c.hi = std::max(c.lo, anchor_multiple * c.median);
  c.anchor_multiple = anchor_multiple;
  return c;
}

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::Good: return "good";
    case Verdict::Poor: return "poor";
    case Verdict::Indeterminate: return "indeterminate";
  }
  return "indeterminate";
}

Verdict parse_verdict(std::string_view text) {
  if (text == "good") return Verdict::Good;
  if (text == "poor") return Verdict::Poor;
  if (text == "indeterminate") return Verdict::Indeterminate;
  throw std::invalid_argument(fmt::format("unknown verdict '{}'", text));
}

Verdict verdict_for(double mean_score) {
  if (mean_score > kGoodThreshold) return Verdict::Good;
  if (mean_score < kPoorThreshold) return Verdict::Poor;
  return Verdict::Indeterminate;
}

QualityReport make_report(std::vector<double> losses, const Calibration& calibration, std::size_t bins) {
  if (losses.empty()) throw DataError("quality report: no epochs to score");
  if (bins == 0) throw std::invalid_argument("quality report: bins must be positive");
  QualityReport r;
  r.calibration = calibration;
  r.losses = std::move(losses);
  r.histogram.assign(bins, 0);
  for (double l : r.losses) {
    const double s = calibration.score(l);
    r.scores.push_back(s);
    ++r.histogram[std::min(bins - 1, static_cast<std::size_t>(s * static_cast<double>(bins)))];
  }
  r.mean_score = std::accumulate(r.scores.begin(), r.scores.end(), 0.0) / static_cast<double>(r.scores.size());
  r.verdict = verdict_for(r.mean_score);
  return r;
}

QualityReport score(const AutoencoderCheckpoint& ckpt, const EpochSet& data, const EpochSet& calibration,
                    std::size_t bins) {
  if (calibration.count() == 0) throw DataError("quality: empty calibration set");
  if (data.count() == 0) throw DataError("quality: no epochs to score");
  return make_report(reconstruction_losses(ckpt, data), calibrate(reconstruction_losses(ckpt, calibration)), bins);
}

nlohmann::json to_json(const QualityReport& r) {
  return {{"mean_score", r.mean_score},
          {"verdict", to_string(r.verdict)},
          {"thresholds", {{"good_above", kGoodThreshold}, {"poor_below", kPoorThreshold}}},
          {"calibration",
           {{"lo", r.calibration.lo},
            {"hi", r.calibration.hi},
            {"median", r.calibration.median},
            {"anchor_multiple", r.calibration.anchor_multiple}}},
          {"histogram", r.histogram},
          {"scores", r.scores},
          {"losses", r.losses}};
}

QualityReport report_from_json(const nlohmann::json& j) {
  QualityReport r;
  r.mean_score = j.at("mean_score");
  r.verdict = parse_verdict(j.at("verdict").get<std::string>());
  const auto& c = j.at("calibration");
  r.calibration.lo = c.at("lo");
  r.calibration.hi = c.at("hi");
  r.calibration.median = c.at("median");
  r.calibration.anchor_multiple = c.at("anchor_multiple");
  r.histogram = j.at("histogram").get<std::vector<std::size_t>>();
  r.scores = j.at("scores").get<std::vector<double>>();
  r.losses = j.at("losses").get<std::vector<double>>();
  return r;
}

void write_report(const fs::path& path, const QualityReport& r) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << to_json(r).dump(2) << '\n';
}

QualityReport read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot read '{}'", path.string()));
  return report_from_json(nlohmann::json::parse(in));
}

void write_histogram_svg(const fs::path& path, const QualityReport& r, const std::string& title) {
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 20, kTop = 40, kBottom = 50;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  const std::size_t peak = std::max<std::size_t>(1, *std::max_element(r.histogram.begin(), r.histogram.end()));
  const double bw = pw / static_cast<double>(r.histogram.size());

  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" "
      "font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      kW, kH);
  svg += fmt::format("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", kW / 2,
                     title.empty() ? fmt::format("quality scores (mean {:.3f}, {})", r.mean_score, to_string(r.verdict))
                                   : title);
  for (std::size_t i = 0; i < r.histogram.size(); ++i) {
    const double h = ph * static_cast<double>(r.histogram[i]) / static_cast<double>(peak);
    svg += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"#4c72b0\"/>\n",
                       kLeft + i * bw + 1, kTop + ph - h, std::max(bw - 2, 1.0), h);
  }
  for (auto [x, colour] : {std::pair{kPoorThreshold, "#c44e52"}, std::pair{kGoodThreshold, "#55a868"}}) {
    svg += fmt::format(
        "<line x1=\"{0:.2f}\" x2=\"{0:.2f}\" y1=\"{1}\" y2=\"{2}\" stroke=\"{3}\" stroke-dasharray=\"4 3\"/>\n",
        kLeft + x * pw, kTop, kTop + ph, colour);
  }
  svg += fmt::format("<line x1=\"{0}\" x2=\"{1}\" y1=\"{2}\" y2=\"{2}\" stroke=\"black\"/>\n", kLeft, kLeft + pw,
                     kTop + ph);
  svg += fmt::format("<line x1=\"{0}\" x2=\"{0}\" y1=\"{1}\" y2=\"{2}\" stroke=\"black\"/>\n", kLeft, kTop, kTop + ph);
  for (int t = 0; t <= 4; ++t) {
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{}\" text-anchor=\"middle\">{:.2f}</text>\n", kLeft + t * pw / 4,
                       kTop + ph + 18, t / 4.0);
  }
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n", kLeft - 6, kTop + 4, peak);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text>\n", kLeft - 6, kTop + ph);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">score</text>\n", kLeft + pw / 2, kH - 10);
  svg += "</svg>\n";

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << svg;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const fs::path& path, const AutoencoderCheckpoint& ckpt) {
  checkpoint::Container c;
  c.header = {{"kind", "autoencoder"},
              {"config", to_json(ckpt.config)},
              {"channels", ckpt.layout.names},
              {"samples", ckpt.samples}};
  if (ckpt.layout.reference) c.header["reference"] = *ckpt.layout.reference;
  c.put("curve.loss", checkpoint::vector_tensor(ckpt.loss_curve));
  for (std::size_t i = 0; i < ckpt.state.size(); ++i) c.put(fmt::format("model.{}", i), ckpt.state[i]);
  checkpoint::save(path, c);
}

AutoencoderCheckpoint load_checkpoint(const fs::path& path) {
  const auto c = checkpoint::load(path);
  if (c.header.value("kind", "") != "autoencoder") {
    throw std::runtime_error(fmt::format("'{}' is not an autoencoder checkpoint", path.string()));
  }
  AutoencoderCheckpoint ckpt;
  ckpt.config = autoencoder_config_from_json(c.header.at("config"));
  ckpt.layout.names = c.header.at("channels").get<std::vector<std::string>>();
  if (c.header.contains("reference")) ckpt.layout.reference = c.header.at("reference").get<std::string>();
  ckpt.samples = c.header.at("samples");
  ckpt.loss_curve = checkpoint::tensor_vector(c.tensor("curve.loss"));
  for (std::size_t i = 0; c.has(fmt::format("model.{}", i)); ++i) ckpt.state.push_back(c.tensor(fmt::format("model.{}", i)));
  std::mt19937_64 init(0);
  Autoencoder model(ckpt.layout.size(), ckpt.config, init);
  checkpoint::restore(model, ckpt.state);
  return ckpt;
}

}  // namespace gepd::quality
