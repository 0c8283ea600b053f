#include "gepd/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "gepd/checkpoint.hpp"
#include "gepd/nn/init.hpp"
#include "gepd/nn/optim.hpp"

namespace gepd::classifier {

namespace fs = std::filesystem;

void PdnexConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("pdnex config: " + m); };
  if (n_channels == 0) fail("n_channels must be positive");
  if (n_samples < 64) fail(fmt::format("n_samples {} too short for three 1x4 pools (need >= 64)", n_samples));
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (dilation1 == 0 || dilation2 == 0) fail("dilations must be positive integers");
  if (n_classes < 2) fail("n_classes must be at least 2");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (epochs == 0) fail("epochs must be positive");
  if (!(lr_start > 0.0) || !(lr_end > 0.0)) fail("learning rates must be positive");
  if (!(lr_end < lr_start)) fail("lr_end must be below lr_start");
  if (l1_coeff < 0.0 || l2_coeff < 0.0) fail("regularisation coefficients must be non-negative");
}

Tensor depthwise_conv(const Tensor& input, const Tensor& kernel, std::size_t groups) {
  if (input.rank() != 4 || kernel.rank() != 4) throw std::invalid_argument("depthwise_conv: rank-4 tensors expected");
  nn::ConvGeometry g;
  g.kernel_h = kernel.dim(2);
  g.kernel_w = kernel.dim(3);
  g.groups = groups;
  return nn::conv2d(input, kernel, nullptr, g);
}

Tensor dilated_conv(const Tensor& input, const Tensor& kernel, std::size_t dilation) {
  if (dilation == 0) throw std::invalid_argument("dilated_conv: dilation must be >= 1");
  if (input.rank() != 4 || kernel.rank() != 4) throw std::invalid_argument("dilated_conv: rank-4 tensors expected");
  nn::ConvGeometry g;
  g.kernel_h = kernel.dim(2);
  g.kernel_w = kernel.dim(3);
  g.dilation_h = dilation;
  g.dilation_w = dilation;
  return nn::conv2d(input, kernel, nullptr, g);
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

namespace {

nn::Conv2d& add_conv(nn::Sequential& seq, std::size_t in, std::size_t out, const nn::ConvGeometry& g,
                     std::mt19937_64& rng) {
  auto& conv = seq.emplace<nn::Conv2d>(in, out, g, false, rng);
  nn::kaiming_normal(conv.weight().value, (in / g.groups) * g.kernel_h * g.kernel_w, rng);
  return conv;
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

Pdnex::Pdnex(const PdnexConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(mix(seed));
  auto block = [&] {
    blocks_.push_back(std::make_unique<nn::Sequential>());
    return blocks_.back().get();
  };
  auto dropout = [&](nn::Sequential* s) {
    dropouts_.push_back(&s->emplace<nn::Dropout>(cfg_.dropout, mix(seed + 101 + dropouts_.size())));
  };

  auto* b1 = block();
  add_conv(*b1, 1, 4, nn::ConvGeometry::same(1, 32), rng);
  b1->emplace<nn::BatchNorm2d>(4);
  b1->emplace<nn::Elu>();

  auto* b2 = block();
  add_conv(*b2, 4, 8, nn::ConvGeometry::same(1, 32), rng);
  b2->emplace<nn::BatchNorm2d>(8);
  b2->emplace<nn::Elu>();

  auto* b3 = block();
  nn::ConvGeometry collapse;
  collapse.kernel_h = cfg_.n_channels;
  collapse.groups = 8;
  add_conv(*b3, 8, 16, collapse, rng);
  b3->emplace<nn::BatchNorm2d>(16);
  b3->emplace<nn::Elu>();

  auto* b4 = block();
  b4->emplace<nn::AvgPoolWidth>(4);
  dropout(b4);

  auto* b5 = block();
  add_conv(*b5, 16, 16, nn::ConvGeometry::same(1, 8, 1, cfg_.dilation1, 16), rng);
  add_conv(*b5, 16, 8, nn::ConvGeometry{}, rng);
  b5->emplace<nn::BatchNorm2d>(8);
  b5->emplace<nn::Elu>();
  b5->emplace<nn::AvgPoolWidth>(4);
  dropout(b5);

  auto* b6 = block();
  add_conv(*b6, 8, 8, nn::ConvGeometry::same(1, 8, 1, cfg_.dilation2, 8), rng);
  add_conv(*b6, 8, 2, nn::ConvGeometry{}, rng);
  b6->emplace<nn::BatchNorm2d>(2);
  b6->emplace<nn::Elu>();
  b6->emplace<nn::AvgPoolWidth>(4);
  dropout(b6);

  auto* b7 = block();
  b7->emplace<nn::Flatten>();
  auto& fc = b7->emplace<nn::Linear>(cfg_.flattened_width(), cfg_.n_classes, rng);
  nn::kaiming_normal(fc.weight().value, cfg_.flattened_width(), rng);
  fc.bias().value.fill(0.0);
}

Tensor Pdnex::forward_blocks(const Tensor& input, std::size_t blocks) {
  Tensor x;
  if (input.rank() == 3) {
    x = input.reshaped({input.dim(0), 1, input.dim(1), input.dim(2)});
  } else if (input.rank() == 4 && input.dim(1) == 1) {
    x = input;
  } else {
    throw std::invalid_argument(fmt::format("pdnex: expected (B, N, M) input, got {}", shape_string(input.shape())));
  }
  if (x.dim(2) != cfg_.n_channels || x.dim(3) != cfg_.n_samples) {
    throw std::invalid_argument(fmt::format("pdnex: input {} does not match configured {} x {}",
                                            shape_string(input.shape()), cfg_.n_channels, cfg_.n_samples));
  }
  input_shape_ = input.shape();
  for (std::size_t i = 0; i < std::min(blocks, blocks_.size()); ++i) x = blocks_[i]->forward(x);
  return x;
}

Tensor Pdnex::forward(const Tensor& input) { return forward_blocks(input, blocks_.size()); }

Tensor Pdnex::backward(const Tensor& grad_output) {
  Tensor g = grad_output;
  for (std::size_t i = blocks_.size(); i-- > 0;) g = blocks_[i]->backward(g);
  return g.reshaped(input_shape_);
}

void Pdnex::collect_parameters(std::vector<nn::Parameter*>& out) {
  for (auto& b : blocks_) b->collect_parameters(out);
}

void Pdnex::collect_buffers(std::vector<Tensor*>& out) {
  for (auto& b : blocks_) b->collect_buffers(out);
}

void Pdnex::set_training(bool training) {
  Module::set_training(training);
  for (auto& b : blocks_) b->set_training(training);
}

void Pdnex::reseed_dropout(std::uint64_t seed) {
  for (std::size_t i = 0; i < dropouts_.size(); ++i) dropouts_[i]->reseed(mix(seed + 101 + i));
}

// ---------------------------------------------------------------------------
// Training and inference
// ---------------------------------------------------------------------------

namespace {

Tensor batch_input(const EpochSet& data, std::span<const std::size_t> rows) {
  Tensor x = data.epochs.gather_rows(rows);
  x.reshape({rows.size(), 1, data.channels(), data.samples()});
  return x;
}

}  // namespace

ClassifierCheckpoint train_classifier(const EpochSet& data, PdnexConfig cfg, const TrainConfig& tcfg,
                                      const EpochCallback& on_epoch) {
  tcfg.validate();
  if (data.count() == 0) throw DataError("train_classifier: no training epochs");
  data.validate();
  const auto hc = data.count_where(Label::HC, std::nullopt);
  if (hc == 0 || hc == data.count()) throw DataError("train_classifier: training data must contain both HC and PD");
  cfg.n_channels = data.channels();
  cfg.n_samples = data.samples();
  cfg.validate();

  Pdnex model(cfg, tcfg.seed);
  model.set_training(true);
  const auto params = model.parameters();
  nn::Adam opt(params, {.lr = tcfg.lr_start});
  std::mt19937_64 shuffle_rng(mix(tcfg.seed ^ 0x5EEDULL));

  const auto labels = data.label_ints();
  std::vector<std::size_t> order(data.count());
  std::iota(order.begin(), order.end(), 0);

  ClassifierCheckpoint ckpt;
  ckpt.config = cfg;
  ckpt.train = tcfg;
  ckpt.layout = data.layout;
  ckpt.epoch_length_s = data.epoch_length_s;
  ckpt.sampling_rate = data.sampling_rate;

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = nn::cosine_annealing_lr(static_cast<double>(epoch), static_cast<double>(tcfg.epochs),
                                              tcfg.lr_start, tcfg.lr_end);
    opt.set_lr(lr);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      // A trailing batch of one has no batch statistics; the shuffle varies which epoch sits out.
      if (end - start < 2 && order.size() >= 2) continue;
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      std::vector<int> y;
      for (std::size_t r : rows) y.push_back(labels[r]);

      opt.zero_grad();
      const Tensor logits = model.forward(batch_input(data, rows));
      auto ce = nn::softmax_cross_entropy(logits, y);
      const double penalty = nn::apply_weight_penalty(params, tcfg.l1_coeff, tcfg.l2_coeff);
      const double loss = ce.value + penalty;
      if (!std::isfinite(loss)) {
        throw DivergenceError(fmt::format("classifier loss became non-finite at epoch {} (lr {})", epoch, lr));
      }
      model.backward(ce.grad);
      opt.step();

      loss_sum += loss * static_cast<double>(rows.size());
      seen += rows.size();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const int pred = logits[i * cfg.n_classes + 1] > logits[i * cfg.n_classes] ? 1 : 0;
        correct += pred == y[i] ? 1 : 0;
      }
    }
    const double mean_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    const double acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    ckpt.loss_curve.push_back(mean_loss);
    ckpt.accuracy_curve.push_back(acc);
    ckpt.lr_curve.push_back(lr);
    if (on_epoch) on_epoch(epoch, mean_loss, acc);
  }
  ckpt.state = checkpoint::snapshot(model);
  return ckpt;
}

std::unique_ptr<Pdnex> restore_model(const ClassifierCheckpoint& ckpt) {
  auto model = std::make_unique<Pdnex>(ckpt.config, ckpt.train.seed);
  checkpoint::restore(*model, ckpt.state);
  model->set_training(false);
  return model;
}

Tensor predict_logits(Pdnex& model, const EpochSet& data) {
  if (data.count() == 0) throw DataError("predict: no epochs");
  const auto& cfg = model.config();
  if (data.channels() != cfg.n_channels || data.samples() != cfg.n_samples) {
    throw DataError(fmt::format("predict: data is {} x {}, model expects {} x {}", data.channels(), data.samples(),
                                cfg.n_channels, cfg.n_samples));
  }
  model.set_training(false);
  Tensor out({data.count(), cfg.n_classes});
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.count(); start += cfg.batch_size) {
    const std::size_t end = std::min(data.count(), start + cfg.batch_size);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    const Tensor logits = model.forward(batch_input(data, rows));
    std::copy(logits.values().begin(), logits.values().end(), out.data() + start * cfg.n_classes);
  }
  return out;
}

Tensor predict_logits(const ClassifierCheckpoint& ckpt, const EpochSet& data) {
  auto model = restore_model(ckpt);
  return predict_logits(*model, data);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

std::string to_string(MetricLevel level) { return level == MetricLevel::Epoch ? "epoch" : "subject_majority"; }

MetricLevel parse_metric_level(std::string_view text) {
  if (text == "epoch") return MetricLevel::Epoch;
  if (text == "subject_majority") return MetricLevel::SubjectMajority;
  throw std::invalid_argument(fmt::format("unknown metric level '{}'", text));
}

Metrics metrics_from_confusion(const Confusion& c, MetricLevel level) {
  if (c.total() == 0) throw DataError("metrics: nothing evaluated");
  Metrics m;
  m.confusion = c;
  m.level = level;
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  m.f1 = denom ? 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom) : 0.0;
  return m;
}

Metrics metrics_from_predictions(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("metrics: length mismatch");
  Confusion c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool t = truth[i] == 1, p = predicted[i] == 1;
    if (t && p) ++c.tp;
    else if (t) ++c.fn;
    else if (p) ++c.fp;
    else ++c.tn;
  }
  return metrics_from_confusion(c);
}

Metrics subject_majority(std::span<const std::string> subjects, std::span<const int> truth,
                         const Tensor& probabilities) {
  struct Tally {
    int label = 0;
    std::size_t votes_pd = 0, count = 0;
    double prob_pd = 0.0;
  };
  std::map<std::string, Tally> tallies;
  const std::size_t k = probabilities.dim(1);
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    auto& t = tallies[subjects[i]];
    t.label = truth[i];
    const double p = probabilities[i * k + 1];
    t.votes_pd += probabilities[i * k + 1] > probabilities[i * k] ? 1 : 0;
    t.prob_pd += p;
    ++t.count;
  }
  std::vector<int> y, pred;
  for (const auto& [subject, t] : tallies) {
    y.push_back(t.label);
    const std::size_t votes_hc = t.count - t.votes_pd;
    if (t.votes_pd != votes_hc) {
      pred.push_back(t.votes_pd > votes_hc ? 1 : 0);
    } else {
      pred.push_back(t.prob_pd / static_cast<double>(t.count) > 0.5 ? 1 : 0);
    }
  }
  Metrics m = metrics_from_predictions(y, pred);
  m.level = MetricLevel::SubjectMajority;
  return m;
}

Metrics evaluate_logits(const Tensor& logits, const EpochSet& data, MetricLevel level) {
  if (data.count() == 0) throw DataError("evaluate: no epochs");
  const auto truth = data.label_ints();
  const std::size_t k = logits.dim(1);
  if (level == MetricLevel::SubjectMajority) {
    return subject_majority(data.subjects, truth, nn::softmax(logits));
  }
  std::vector<int> pred(data.count());
  for (std::size_t i = 0; i < data.count(); ++i) {
    const double* row = logits.data() + i * k;
    pred[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return metrics_from_predictions(truth, pred);
}

Metrics evaluate(const ClassifierCheckpoint& ckpt, const EpochSet& data, MetricLevel level) {
  if (data.count() == 0) throw DataError("evaluate: no epochs");
  return evaluate_logits(predict_logits(ckpt, data), data, level);
}

// ---------------------------------------------------------------------------
// Serialisation
// ---------------------------------------------------------------------------

nlohmann::json to_json(const PdnexConfig& c) {
  return {{"n_channels", c.n_channels}, {"n_samples", c.n_samples}, {"batch_size", c.batch_size},
          {"dropout", c.dropout},       {"dilation1", c.dilation1}, {"dilation2", c.dilation2},
          {"n_classes", c.n_classes}};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},     {"lr_start", c.lr_start}, {"lr_end", c.lr_end},
          {"l1_coeff", c.l1_coeff}, {"l2_coeff", c.l2_coeff}, {"seed", c.seed}};
}

nlohmann::json to_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},
          {"f1", m.f1},
          {"level", to_string(m.level)},
          {"confusion", {{"tp", m.confusion.tp}, {"fn", m.confusion.fn}, {"fp", m.confusion.fp}, {"tn", m.confusion.tn}}}};
}

PdnexConfig pdnex_config_from_json(const nlohmann::json& j) {
  PdnexConfig c;
  c.n_channels = j.at("n_channels");
  c.n_samples = j.at("n_samples");
  c.batch_size = j.at("batch_size");
  c.dropout = j.at("dropout");
  c.dilation1 = j.at("dilation1");
  c.dilation2 = j.at("dilation2");
  c.n_classes = j.at("n_classes");
  return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs");
  c.lr_start = j.at("lr_start");
  c.lr_end = j.at("lr_end");
  c.l1_coeff = j.at("l1_coeff");
  c.l2_coeff = j.at("l2_coeff");
  c.seed = j.at("seed");
  return c;
}

void save_checkpoint(const fs::path& path, const ClassifierCheckpoint& ckpt) {
  checkpoint::Container c;
  c.header = {{"kind", "pdnex"},
              {"config", to_json(ckpt.config)},
              {"train", to_json(ckpt.train)},
              {"channels", ckpt.layout.names},
              {"epoch_length_s", ckpt.epoch_length_s},
              {"sampling_rate", ckpt.sampling_rate}};
  if (ckpt.layout.reference) c.header["reference"] = *ckpt.layout.reference;
  c.put("curve.loss", checkpoint::vector_tensor(ckpt.loss_curve));
  c.put("curve.accuracy", checkpoint::vector_tensor(ckpt.accuracy_curve));
  c.put("curve.lr", checkpoint::vector_tensor(ckpt.lr_curve));
  for (std::size_t i = 0; i < ckpt.state.size(); ++i) c.put(fmt::format("model.{}", i), ckpt.state[i]);
  checkpoint::save(path, c);
}

ClassifierCheckpoint load_checkpoint(const fs::path& path) {
  const auto c = checkpoint::load(path);
  if (c.header.value("kind", "") != "pdnex") {
    throw std::runtime_error(fmt::format("'{}' is not a classifier checkpoint", path.string()));
  }
  ClassifierCheckpoint ckpt;
  ckpt.config = pdnex_config_from_json(c.header.at("config"));
  ckpt.train = train_config_from_json(c.header.at("train"));
  ckpt.layout.names = c.header.at("channels").get<std::vector<std::string>>();
  if (c.header.contains("reference")) ckpt.layout.reference = c.header.at("reference").get<std::string>();
  ckpt.epoch_length_s = c.header.at("epoch_length_s");
  ckpt.sampling_rate = c.header.at("sampling_rate");
  ckpt.loss_curve = checkpoint::tensor_vector(c.tensor("curve.loss"));
  ckpt.accuracy_curve = checkpoint::tensor_vector(c.tensor("curve.accuracy"));
  ckpt.lr_curve = checkpoint::tensor_vector(c.tensor("curve.lr"));
  for (std::size_t i = 0; c.has(fmt::format("model.{}", i)); ++i) ckpt.state.push_back(c.tensor(fmt::format("model.{}", i)));
  // Validates tensor shapes against the architecture.
  restore_model(ckpt);
  return ckpt;
}

}  // namespace gepd::classifier
