#include "gepd/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "gepd/checkpoint.hpp"

namespace gepd::harness {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

StageError::StageError(std::string stage, const std::string& message)
    : std::runtime_error(fmt::format("[{}] {}", stage, message)), stage_(std::move(stage)) {}

QualityGateError::QualityGateError(double mean_score, double threshold)
    : StageError("quality",
                 fmt::format("generated data failed the quality gate: mean score {:.4f} is below {:.2f}", mean_score,
                             threshold)),
      mean_score_(mean_score) {}

// ---------------------------------------------------------------------------
// Enumerations
// ---------------------------------------------------------------------------

std::string to_string(Mode m) { return m == Mode::SingleDataset ? "single_dataset" : "cross_dataset"; }

Mode parse_mode(std::string_view text) {
  if (text == "single_dataset") return Mode::SingleDataset;
  if (text == "cross_dataset") return Mode::CrossDataset;
  throw std::invalid_argument(fmt::format("unknown mode '{}'", text));
}

std::string to_string(GateMode m) {
  switch (m) {
    case GateMode::Off: return "off";
    case GateMode::Warn: return "warn";
    case GateMode::Strict: return "strict";
  }
  return "warn";
}

GateMode parse_gate_mode(std::string_view text) {
  if (text == "off") return GateMode::Off;
  if (text == "warn") return GateMode::Warn;
  if (text == "strict") return GateMode::Strict;
  throw std::invalid_argument(fmt::format("unknown quality gate '{}'", text));
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (name.empty() || name.find_first_of("/\\") != std::string::npos) fail("name must be a plain directory name");
  if (train_dataset.empty()) fail("experiment.train_dataset is required");
  if (mode == Mode::CrossDataset) {
    if (test_dataset.empty()) fail("cross_dataset mode requires experiment.test_dataset");
    if (fs::weakly_canonical(train_dataset) == fs::weakly_canonical(test_dataset)) {
      fail("cross_dataset mode requires distinct train and test manifests");
    }
  }
  if (use_fusion && !(delta > 0.0)) fail("delta must be positive when fusion is enabled");
  if (seeds.empty()) fail("at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) fail("seeds must be distinct");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail("test_fraction must lie in (0, 1)");
  if (quality_bins == 0) fail("quality.bins must be positive");
  autoencoder.validate();
  prune.validate();
  histogram.validate();
  train.validate();
}

// ---------------------------------------------------------------------------
// INI configuration
// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  throw std::invalid_argument(fmt::format("'{}' is not a boolean", v));
}

double parse_double(const std::string& v) {
  std::size_t used = 0;
  const double d = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument(fmt::format("'{}' is not a number", v));
  return d;
}

std::uint64_t parse_u64(const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw std::invalid_argument(fmt::format("'{}' is not a non-negative integer", v));
  }
  return std::stoull(v);
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }
std::string fmt_num(double d) { return fmt::format("{}", d); }

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define GEPD_NUM(sec, key, expr)                                                               \
  Field {                                                                                      \
    sec, key, [](const ExperimentConfig& c) { return fmt_num(c.expr); },                       \
        [](ExperimentConfig& c, const std::string& v) { c.expr = parse_double(v); }            \
  }
#define GEPD_SIZE(sec, key, expr)                                                              \
  Field {                                                                                      \
    sec, key, [](const ExperimentConfig& c) { return fmt::format("{}", c.expr); },             \
        [](ExperimentConfig& c, const std::string& v) { c.expr = parse_u64(v); }               \
  }
#define GEPD_BOOL(sec, key, expr)                                                              \
  Field {                                                                                      \
    sec, key, [](const ExperimentConfig& c) { return fmt_bool(c.expr); },                      \
        [](ExperimentConfig& c, const std::string& v) { c.expr = parse_bool(v); }              \
  }
#define GEPD_ENUM(sec, key, expr, parser)                                                      \
  Field {                                                                                      \
    sec, key, [](const ExperimentConfig& c) { return to_string(c.expr); },                     \
        [](ExperimentConfig& c, const std::string& v) { c.expr = parser(v); }                  \
  }

const std::vector<Field>& fields() {
  using namespace gepd::augment;
  using gepd::classifier::parse_metric_level;
  using gepd::dataio::parse_zscore_scope;
  using gepd::pruning::parse_beta_scope;
  using gepd::pruning::parse_combine;
  using gepd::pruning::parse_threshold_base;
  using gepd::classifier::to_string;
  using gepd::dataio::to_string;
  using gepd::pruning::to_string;
  using gepd::harness::to_string;
  static const std::vector<Field> f = {
      {"experiment", "name", [](const ExperimentConfig& c) { return c.name; },
       [](ExperimentConfig& c, const std::string& v) { c.name = v; }},
      GEPD_ENUM("experiment", "mode", mode, parse_mode),
      {"experiment", "train_dataset", [](const ExperimentConfig& c) { return c.train_dataset.string(); },
       [](ExperimentConfig& c, const std::string& v) { c.train_dataset = v; }},
      {"experiment", "test_dataset", [](const ExperimentConfig& c) { return c.test_dataset.string(); },
       [](ExperimentConfig& c, const std::string& v) { c.test_dataset = v; }},
      GEPD_BOOL("experiment", "use_fusion", use_fusion),
      GEPD_NUM("experiment", "delta", delta),
      GEPD_BOOL("experiment", "use_pruning", use_pruning),
      {"experiment", "seeds", [](const ExperimentConfig& c) { return fmt::format("{}", fmt::join(c.seeds, ", ")); },
       [](ExperimentConfig& c, const std::string& v) {
         c.seeds.clear();
         for (const auto& s : split_list(v)) c.seeds.push_back(parse_u64(s));
       }},
      GEPD_NUM("experiment", "test_fraction", test_fraction),
      GEPD_ENUM("experiment", "metric_level", metric_level, parse_metric_level),
      {"experiment", "classifier", [](const ExperimentConfig& c) { return c.classifier; },
       [](ExperimentConfig& c, const std::string& v) { c.classifier = v; }},
      GEPD_BOOL("experiment", "write_images", write_images),

      GEPD_NUM("preprocess", "band_low_hz", preprocess.band_low_hz),
      GEPD_NUM("preprocess", "band_high_hz", preprocess.band_high_hz),
      GEPD_SIZE("preprocess", "filter_taps", preprocess.filter_taps),
      GEPD_NUM("preprocess", "epoch_length_s", preprocess.epoch_length_s),
      {"preprocess", "reference_channel", [](const ExperimentConfig& c) { return c.preprocess.reference_channel; },
       [](ExperimentConfig& c, const std::string& v) { c.preprocess.reference_channel = v; }},
      GEPD_ENUM("preprocess", "zscore_scope", preprocess.zscore_scope, parse_zscore_scope),
      GEPD_NUM("preprocess", "target_rate_hz", preprocess.target_rate_hz),
      {"preprocess", "channels",
       [](const ExperimentConfig& c) { return fmt::format("{}", fmt::join(c.preprocess.channels, ", ")); },
       [](ExperimentConfig& c, const std::string& v) { c.preprocess.channels = split_list(v); }},

      GEPD_SIZE("gan", "noise_dim", gan.noise_dim),
      GEPD_NUM("gan", "generator_lr", gan.generator_lr),
      GEPD_NUM("gan", "critic_lr", gan.critic_lr),
      GEPD_SIZE("gan", "epochs", gan.epochs),
      GEPD_SIZE("gan", "batch_size", gan.batch_size),
      GEPD_ENUM("gan", "lipschitz", gan.lipschitz, parse_lipschitz),
      GEPD_NUM("gan", "clip", gan.clip),
      GEPD_NUM("gan", "gp_lambda", gan.gp_lambda),
      GEPD_NUM("gan", "beta1", gan.beta1),
      GEPD_NUM("gan", "beta2", gan.beta2),
      GEPD_SIZE("gan", "critic_steps", gan.critic_steps),
      GEPD_SIZE("gan", "window", gan.window),
      GEPD_NUM("gan", "convergence_tol", gan.convergence_tol),
      GEPD_BOOL("gan", "early_stop", gan.early_stop),

      GEPD_SIZE("quality", "hidden_size", autoencoder.hidden_size),
      GEPD_SIZE("quality", "epochs", autoencoder.epochs),
      GEPD_SIZE("quality", "batch_size", autoencoder.batch_size),
      GEPD_NUM("quality", "learning_rate", autoencoder.learning_rate),
      GEPD_ENUM("quality", "gate", quality_gate, parse_gate_mode),
      GEPD_SIZE("quality", "bins", quality_bins),

      GEPD_NUM("pruning", "alpha", prune.alpha),
      GEPD_NUM("pruning", "beta", prune.beta),
      GEPD_ENUM("pruning", "threshold_base", prune.threshold_base, parse_threshold_base),
      GEPD_ENUM("pruning", "combine", prune.combine, parse_combine),
      GEPD_ENUM("pruning", "beta_scope", prune.beta_scope, parse_beta_scope),
      GEPD_SIZE("pruning", "bins", histogram.bins),
      GEPD_NUM("pruning", "epsilon", histogram.epsilon),

      GEPD_SIZE("classifier", "batch_size", pdnex.batch_size),
      GEPD_NUM("classifier", "dropout", pdnex.dropout),
      GEPD_SIZE("classifier", "dilation1", pdnex.dilation1),
      GEPD_SIZE("classifier", "dilation2", pdnex.dilation2),
      GEPD_SIZE("classifier", "epochs", train.epochs),
      GEPD_NUM("classifier", "lr_start", train.lr_start),
      GEPD_NUM("classifier", "lr_end", train.lr_end),
      GEPD_NUM("classifier", "l1_coeff", train.l1_coeff),
      GEPD_NUM("classifier", "l2_coeff", train.l2_coeff),

      GEPD_SIZE("synth", "n_hc", synth.n_hc),
      GEPD_SIZE("synth", "n_pd", synth.n_pd),
      GEPD_SIZE("synth", "n_channels", synth.n_channels),
      {"synth", "channel_names",
       [](const ExperimentConfig& c) { return fmt::format("{}", fmt::join(c.synth.channel_names, ", ")); },
       [](ExperimentConfig& c, const std::string& v) { c.synth.channel_names = split_list(v); }},
      GEPD_NUM("synth", "duration_s", synth.duration_s),
      GEPD_NUM("synth", "sampling_rate", synth.sampling_rate),
      {"synth", "discriminative_channels",
       [](const ExperimentConfig& c) { return fmt::format("{}", fmt::join(c.synth.discriminative_channels, ", ")); },
       [](ExperimentConfig& c, const std::string& v) {
         c.synth.discriminative_channels.clear();
         for (const auto& s : split_list(v)) c.synth.discriminative_channels.push_back(parse_u64(s));
       }},
      GEPD_NUM("synth", "effect_uv", synth.effect_uv),
      GEPD_NUM("synth", "effect_freq_hz", synth.effect_freq_hz),
      GEPD_NUM("synth", "background_uv", synth.background_uv),
      GEPD_NUM("synth", "ar_coefficient", synth.ar_coefficient),
      GEPD_NUM("synth", "alpha_uv", synth.alpha_uv),
      GEPD_NUM("synth", "alpha_freq_hz", synth.alpha_freq_hz),
      GEPD_NUM("synth", "subject_jitter", synth.subject_jitter),
      {"synth", "subject_prefix", [](const ExperimentConfig& c) { return c.synth.subject_prefix; },
       [](ExperimentConfig& c, const std::string& v) { c.synth.subject_prefix = v; }},
      GEPD_NUM("synth", "site_gain", synth.site.gain),
      GEPD_NUM("synth", "site_dc_offset_uv", synth.site.dc_offset_uv),
      GEPD_NUM("synth", "site_alpha_shift_hz", synth.site.alpha_shift_hz),
      GEPD_NUM("synth", "site_extra_noise_uv", synth.site.extra_noise_uv),
      GEPD_NUM("synth", "site_line_noise_uv", synth.site.line_noise_uv),
      GEPD_NUM("synth", "site_line_freq_hz", synth.site.line_freq_hz),
  };
  return f;
}

#undef GEPD_NUM
#undef GEPD_SIZE
#undef GEPD_BOOL
#undef GEPD_ENUM

const Field& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (f.section == section && f.key == key) return f;
  }
  throw std::invalid_argument(fmt::format("unknown config key '{}.{}'", section, key));
}

void set_field(ExperimentConfig& cfg, const std::string& section, const std::string& key, const std::string& value) {
  const Field& f = find_field(section, key);
  try {
    f.set(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(fmt::format("config key '{}.{}': {}", section, key, e.what()));
  } catch (const std::out_of_range&) {
    throw std::invalid_argument(fmt::format("config key '{}.{}': value '{}' out of range", section, key, value));
  }
}

void resolve_paths(ExperimentConfig& cfg, const fs::path& base) {
  if (base.empty()) return;
  for (fs::path* p : {&cfg.train_dataset, &cfg.test_dataset}) {
    if (!p->empty() && p->is_relative()) *p = (base / *p).lexically_normal();
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& ini_text, const fs::path& base_dir) {
  pt::ptree tree;
  std::istringstream in(ini_text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(fmt::format("malformed config (line {}): {}", e.line(), e.message()));
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw std::invalid_argument(fmt::format("config key '{}' must be inside a section", section));
    }
    for (const auto& [key, value] : body) set_field(cfg, section, key, trim(value.data()));
  }
  resolve_paths(cfg, base_dir);
  return cfg;
}

ExperimentConfig apply_overrides(const ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  ExperimentConfig out = cfg;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw std::invalid_argument(fmt::format("override '{}' must look like section.key=value", o));
    }
    set_field(out, trim(o.substr(0, dot)), trim(o.substr(dot + 1, eq - dot - 1)), trim(o.substr(eq + 1)));
  }
  return out;
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument(fmt::format("cannot read config '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return apply_overrides(parse_config(ss.str(), path.parent_path()), overrides);
}

std::string format_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += fmt::format("[{}]\n", section);
    }
    out += fmt::format("{} = {}\n", f.key, f.get(cfg));
  }
  return out;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : fields()) j[f.section][f.key] = f.get(cfg);
  return j;
}

std::uint64_t stage_seed(std::uint64_t master, std::string_view stage) {
  // FNV-1a of the stage name, then a splitmix64 finaliser.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : stage) h = (h ^ c) * 0x100000001B3ULL;
  std::uint64_t x = master ^ h;
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

void save_epochs(const fs::path& path, const EpochSet& e) {
  e.validate();
  checkpoint::Container c;
  std::vector<std::string> labels, provenance;
  for (Label l : e.labels) labels.push_back(to_string(l));
  for (Provenance p : e.provenance) provenance.push_back(to_string(p));
  c.header = {{"kind", "epochs"},
              {"channels", e.layout.names},
              {"epoch_length_s", e.epoch_length_s},
              {"sampling_rate", e.sampling_rate},
              {"labels", labels},
              {"provenance", provenance},
              {"subjects", e.subjects}};
  if (e.layout.reference) c.header["reference"] = *e.layout.reference;
  c.put("epochs", e.epochs.rank() == 3 ? e.epochs : Tensor({0, e.layout.size(), 0}));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  checkpoint::save(path, c);
}

EpochSet load_epochs(const fs::path& path) {
  const auto c = checkpoint::load(path);
  if (c.header.value("kind", "") != "epochs") {
    throw DataError(fmt::format("'{}' is not an epoch file", path.string()));
  }
  EpochSet e;
  e.layout.names = c.header.at("channels").get<std::vector<std::string>>();
  if (c.header.contains("reference")) e.layout.reference = c.header.at("reference").get<std::string>();
  e.epoch_length_s = c.header.at("epoch_length_s");
  e.sampling_rate = c.header.at("sampling_rate");
  for (const auto& l : c.header.at("labels")) e.labels.push_back(parse_label(l.get<std::string>()));
  for (const auto& p : c.header.at("provenance")) e.provenance.push_back(parse_provenance(p.get<std::string>()));
  e.subjects = c.header.at("subjects").get<std::vector<std::string>>();
  e.epochs = c.tensor("epochs");
  e.validate();
  return e;
}

void write_mask(const fs::path& path, const pruning::ChannelMask& mask) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& t : mask.trace) {
    trace.push_back({{"channel", t.channel},
                     {"hc_real_fake_ok", t.hc_real_fake_ok},
                     {"pd_real_fake_ok", t.pd_real_fake_ok},
                     {"real_hc_pd_ok", t.real_hc_pd_ok},
                     {"fake_hc_pd_ok", t.fake_hc_pd_ok},
                     {"retained", t.retained}});
  }
  const nlohmann::json j = {{"retained", mask.retained},
                            {"thresholds",
                             {{"alpha_real", mask.thresholds.alpha_real},
                              {"alpha_fake", mask.thresholds.alpha_fake},
                              {"beta_hc", mask.thresholds.beta_hc},
                              {"beta_pd", mask.thresholds.beta_pd}}},
                            {"trace", trace}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << j.dump(2) << '\n';
}

pruning::ChannelMask read_mask(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot read mask '{}'", path.string()));
  const auto j = nlohmann::json::parse(in);
  pruning::ChannelMask m;
  m.retained = j.at("retained").get<std::vector<std::string>>();
  if (m.retained.empty()) throw DataError(fmt::format("mask '{}' retains no channels", path.string()));
  const auto& t = j.at("thresholds");
  m.thresholds = {t.at("alpha_real"), t.at("alpha_fake"), t.at("beta_hc"), t.at("beta_pd")};
  for (const auto& r : j.value("trace", nlohmann::json::array())) {
    m.trace.push_back({r.at("channel"), r.at("hc_real_fake_ok"), r.at("pd_real_fake_ok"), r.at("real_hc_pd_ok"),
                       r.at("fake_hc_pd_ok"), r.at("retained")});
  }
  return m;
}

fs::path next_run_dir(const fs::path& root, const std::string& name) {
  const fs::path base = root / name;
  fs::create_directories(base);
  for (std::size_t i = 1; i < 100000; ++i) {
    const fs::path dir = base / fmt::format("run-{:03d}", i);
    // create_directory returns false when the entry already exists.
    if (fs::create_directory(dir)) return dir;
  }
  throw std::runtime_error(fmt::format("no free run directory under '{}'", base.string()));
}

fs::path default_output_root() {
  if (const char* env = std::getenv("GEPD_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

// ---------------------------------------------------------------------------
// Classifier registry
// ---------------------------------------------------------------------------

namespace {

class PdnexBackend : public ClassifierBackend {
 public:
  explicit PdnexBackend(const ExperimentConfig& cfg) : pdnex_(cfg.pdnex), train_(cfg.train) {}

  void fit(const EpochSet& train, std::uint64_t seed) override {
    classifier::TrainConfig t = train_;
    t.seed = seed;
    ckpt_ = classifier::train_classifier(train, pdnex_, t);
  }
  Tensor predict_logits(const EpochSet& data) override { return classifier::predict_logits(checked(), data); }
  void save(const fs::path& path) const override { classifier::save_checkpoint(path, checked()); }
  std::string file_name() const override { return "classifier.ckpt"; }

 private:
  const classifier::ClassifierCheckpoint& checked() const {
    if (!ckpt_) throw std::logic_error("classifier used before fit");
    return *ckpt_;
  }
  classifier::PdnexConfig pdnex_;
  classifier::TrainConfig train_;
  std::optional<classifier::ClassifierCheckpoint> ckpt_;
};

std::map<std::string, BackendFactory>& registry() {
  static std::map<std::string, BackendFactory> r = {
      {"pdnex", [](const ExperimentConfig& c) { return std::make_unique<PdnexBackend>(c); }}};
  return r;
}

}  // namespace

void register_classifier(const std::string& name, BackendFactory factory) { registry()[name] = std::move(factory); }

std::unique_ptr<ClassifierBackend> make_classifier(const ExperimentConfig& cfg) {
  const auto it = registry().find(cfg.classifier);
  if (it == registry().end()) {
    throw std::invalid_argument(
        fmt::format("unknown classifier '{}' (known: {})", cfg.classifier, fmt::join(classifier_names(), ", ")));
  }
  return it->second(cfg);
}

std::vector<std::string> classifier_names() {
  std::vector<std::string> out;
  for (const auto& [k, v] : registry()) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

Summary summarize(const std::vector<SeedResult>& results) {
  Summary s;
  if (results.empty()) return s;
  const double n = static_cast<double>(results.size());
  for (const auto& r : results) {
    s.accuracy_mean += r.metrics.accuracy / n;
    s.f1_mean += r.metrics.f1 / n;
  }
  for (const auto& r : results) {
    s.accuracy_std += (r.metrics.accuracy - s.accuracy_mean) * (r.metrics.accuracy - s.accuracy_mean) / n;
    s.f1_std += (r.metrics.f1 - s.f1_mean) * (r.metrics.f1 - s.f1_mean) / n;
  }
  s.accuracy_std = std::sqrt(s.accuracy_std);
  s.f1_std = std::sqrt(s.f1_std);
  return s;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Context {
  const ExperimentConfig& cfg;
  const RunOptions& options;
  fs::path run_dir;
  std::vector<std::string> warnings;
  std::map<std::string, double> timings;

  void log(const std::string& stage, const std::string& msg) const {
    if (options.log) options.log(fmt::format("[{}] {}", stage, msg));
  }

  // Runs `f`, tags failures with the stage name and accumulates wall time.
  template <typename F>
  auto stage(const std::string& name, F&& f) -> decltype(f()) {
    const auto start = Clock::now();
    struct Timer {
      Context& ctx;
      const std::string& name;
      Clock::time_point start;
      ~Timer() { ctx.timings[name] += std::chrono::duration<double>(Clock::now() - start).count(); }
    } timer{*this, name, start};
    try {
      return f();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  }
};

std::string rel(const Context& ctx, const fs::path& p) { return p.lexically_relative(ctx.run_dir).generic_string(); }

EpochSet load_and_preprocess(Context& ctx, const fs::path& manifest) {
  dataio::LoadOptions opts;
  opts.target_rate_hz = ctx.cfg.preprocess.target_rate_hz;
  opts.access_log = ctx.options.access_log;
  const auto recs = dataio::load_dataset(manifest, opts);
  std::vector<std::string> warnings;
  EpochSet e = dataio::preprocess(recs, ctx.cfg.preprocess, &warnings);
  for (auto& w : warnings) ctx.warnings.push_back(std::move(w));
  ctx.log("preprocess", fmt::format("{}: {} subjects, {} epochs of {} x {}", manifest.filename().string(),
                                    recs.size(), e.count(), e.channels(), e.samples()));
  return e;
}

struct Split {
  EpochSet train;
  EpochSet test;
};

// Holds out whole subjects, a fraction of each class, so no subject
// contributes epochs to both sides.
Split split_by_subject(const EpochSet& data, double test_fraction, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::set<std::string> test_subjects;
  for (Label label : {Label::HC, Label::PD}) {
    std::vector<std::string> subjects;
    for (std::size_t i = 0; i < data.count(); ++i) {
      if (data.labels[i] == label &&
          std::find(subjects.begin(), subjects.end(), data.subjects[i]) == subjects.end()) {
        subjects.push_back(data.subjects[i]);
      }
    }
    std::sort(subjects.begin(), subjects.end());
    if (subjects.size() < 2) {
      throw DataError(fmt::format("single-dataset split needs at least two {} subjects, found {}", to_string(label),
                                  subjects.size()));
    }
    std::shuffle(subjects.begin(), subjects.end(), rng);
    const auto n = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(subjects.size()))), 1,
        subjects.size() - 1);
    test_subjects.insert(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n));
  }
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < data.count(); ++i) (test_subjects.contains(data.subjects[i]) ? te : tr).push_back(i);
  return {data.subset(tr), data.subset(te)};
}

struct GanPair {
  augment::GanCheckpoint hc;
  augment::GanCheckpoint pd;
};

GanPair train_gans(Context& ctx, const EpochSet& train, std::uint64_t seed, const fs::path& dir, SeedResult& result) {
  return ctx.stage("train-gan", [&] {
    GanPair pair;
    for (Label label : {Label::HC, Label::PD}) {
      const EpochSet group = train.subset(train.indices_where(label, Provenance::Real));
      const std::string tag = label == Label::HC ? "hc" : "pd";
      ctx.log("train-gan", fmt::format("seed {} {}: {} real epochs", seed, to_string(label), group.count()));
      auto ckpt = augment::train_gan(group, ctx.cfg.gan, stage_seed(seed, "gan-" + tag));
      const fs::path path = dir / fmt::format("gan_{}.ckpt", tag);
      augment::save_checkpoint(path, ckpt);
      result.artifacts["gan_" + tag] = rel(ctx, path);
      (label == Label::HC ? pair.hc : pair.pd) = std::move(ckpt);
    }
    return pair;
  });
}

std::optional<quality::AutoencoderCheckpoint> train_quality_model(Context& ctx, const EpochSet& train,
                                                                  std::uint64_t seed, const fs::path& dir,
                                                                  SeedResult& result) {
  if (ctx.cfg.quality_gate == GateMode::Off) return std::nullopt;
  return ctx.stage("quality", [&] {
    auto ae = quality::train_autoencoder(train, ctx.cfg.autoencoder, stage_seed(seed, "quality"));
    const fs::path path = dir / "autoencoder.ckpt";
    quality::save_checkpoint(path, ae);
    result.artifacts["autoencoder"] = rel(ctx, path);
    return ae;
  });
}

void quality_gate(Context& ctx, const quality::AutoencoderCheckpoint& ae, const EpochSet& generated,
                  const EpochSet& calibration, const fs::path& dir, SeedResult& result) {
  ctx.stage("quality", [&] {
    const auto report = quality::score(ae, generated, calibration, ctx.cfg.quality_bins);
    quality::write_report(dir / "quality.json", report);
    result.artifacts["quality_report"] = rel(ctx, dir / "quality.json");
    if (ctx.cfg.write_images) {
      quality::write_histogram_svg(dir / "quality.svg", report);
      result.artifacts["quality_histogram"] = rel(ctx, dir / "quality.svg");
    }
    result.quality_mean = report.mean_score;
    result.quality_verdict = report.verdict;
    ctx.log("quality", fmt::format("seed {}: mean score {:.4f} ({})", result.seed, report.mean_score,
                                   quality::to_string(report.verdict)));
    if (report.mean_score < quality::kPoorThreshold) {
      if (ctx.cfg.quality_gate == GateMode::Strict) throw QualityGateError(report.mean_score, quality::kPoorThreshold);
      ctx.warnings.push_back(fmt::format("seed {}: generated data mean quality score {:.4f} is below {:.2f}",
                                         result.seed, report.mean_score, quality::kPoorThreshold));
    }
  });
}

// Fusion, pruning and classifier training for one seed and delta. Returns the
// fitted classifier and the mask to apply to test data.
struct Trained {
  std::unique_ptr<ClassifierBackend> model;
  pruning::ChannelMask mask;
};

Trained fit_downstream(Context& ctx, const EpochSet& train, const EpochSet* generated, std::uint64_t seed,
                       const fs::path& dir, SeedResult& result) {
  const auto& cfg = ctx.cfg;
  EpochSet fit_set = train;
  if (cfg.use_fusion) {
    fit_set = ctx.stage("fuse", [&] { return concat(train, *generated); });
    result.generated_epochs = generated->count();
  }
  pruning::ChannelMask mask = pruning::full_mask(train.layout);
  if (cfg.use_pruning) {
    mask = ctx.stage("prune", [&] {
      const auto table = pruning::similarity_table(concat(train, *generated), cfg.histogram);
      auto m = pruning::prune(table, cfg.prune);
      const auto files = pruning::export_similarity(table, m, dir, cfg.write_images);
      write_mask(dir / "mask.json", m);
      result.artifacts["similarity_csv"] = rel(ctx, files.csv);
      result.artifacts["mask"] = rel(ctx, dir / "mask.json");
      if (cfg.write_images) {
        result.artifacts["heatmap_before"] = rel(ctx, files.heatmap_before);
        result.artifacts["heatmap_after"] = rel(ctx, files.heatmap_after);
      }
      ctx.log("prune", fmt::format("seed {}: kept {} of {} channels", seed, m.retained.size(), table.rows.size()));
      return m;
    });
    fit_set = pruning::apply_mask(fit_set, mask);
  }
  result.channels = mask.retained;
  result.train_epochs = fit_set.count();
  auto model = ctx.stage("train-classifier", [&] {
    auto m = make_classifier(cfg);
    ctx.log("train-classifier", fmt::format("seed {}: {} epochs x {} channels", seed, fit_set.count(),
                                            fit_set.channels()));
    m->fit(fit_set, stage_seed(seed, "classifier"));
    const fs::path path = dir / m->file_name();
    m->save(path);
    result.artifacts["classifier"] = rel(ctx, path);
    return m;
  });
  return {std::move(model), std::move(mask)};
}

classifier::Metrics evaluate_on(Context& ctx, ClassifierBackend& model, const pruning::ChannelMask& mask,
                                const EpochSet& test, SeedResult& result) {
  return ctx.stage("evaluate", [&] {
    const EpochSet masked = pruning::apply_mask(test, mask);
    result.test_epochs = masked.count();
    const auto m = classifier::evaluate_logits(model.predict_logits(masked), masked, ctx.cfg.metric_level);
    ctx.log("evaluate", fmt::format("seed {}: accuracy {:.4f} f1 {:.4f}", result.seed, m.accuracy, m.f1));
    return m;
  });
}

nlohmann::json seed_json(const SeedResult& r) {
  nlohmann::json j = {{"seed", r.seed},
                      {"metrics", classifier::to_json(r.metrics)},
                      {"train_epochs", r.train_epochs},
                      {"generated_epochs", r.generated_epochs},
                      {"test_epochs", r.test_epochs},
                      {"channels", r.channels},
                      {"artifacts", r.artifacts}};
  j["quality_mean_score"] = r.quality_mean ? nlohmann::json(*r.quality_mean) : nlohmann::json();
  j["quality_verdict"] = r.quality_verdict ? nlohmann::json(quality::to_string(*r.quality_verdict)) : nlohmann::json();
  return j;
}

nlohmann::json summary_json(const Summary& s) {
  return {{"accuracy_mean", s.accuracy_mean},
          {"accuracy_std", s.accuracy_std},
          {"f1_mean", s.f1_mean},
          {"f1_std", s.f1_std}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << text;
}

void write_metrics_csv(const fs::path& path, const std::vector<SeedResult>& seeds, const Summary& s) {
  std::string csv = "seed,accuracy,f1,tp,fn,fp,tn\n";
  for (const auto& r : seeds) {
    const auto& c = r.metrics.confusion;
    csv += fmt::format("{},{:.17g},{:.17g},{},{},{},{}\n", r.seed, r.metrics.accuracy, r.metrics.f1, c.tp, c.fn, c.fp,
                       c.tn);
  }
  csv += fmt::format("mean,{:.17g},{:.17g},,,,\n", s.accuracy_mean, s.f1_mean);
  csv += fmt::format("std,{:.17g},{:.17g},,,,\n", s.accuracy_std, s.f1_std);
  write_text(path, csv);
}

void write_run_files(Context& ctx, const nlohmann::json& body) {
  write_text(ctx.run_dir / "config.ini", format_config(ctx.cfg));
  write_text(ctx.run_dir / "report.json", body.dump(2) + "\n");
  write_text(ctx.run_dir / "timings.json", nlohmann::json(ctx.timings).dump(2) + "\n");
}

}  // namespace

nlohmann::json to_json(const ExperimentReport& r) {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : r.seeds) seeds.push_back(seed_json(s));
  return {{"kind", "experiment"},
          {"config", to_json(r.config)},
          {"seeds", seeds},
          {"summary", summary_json(r.summary)},
          {"warnings", r.warnings},
          {"artifacts", r.artifacts}};
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  make_classifier(cfg);
  Context ctx{cfg, options, next_run_dir(options.output_root.value_or(default_output_root()), cfg.name), {}, {}};
  ctx.log("run", fmt::format("{} in {}", to_string(cfg.mode), ctx.run_dir.string()));

  const EpochSet train_all = ctx.stage("preprocess", [&] { return load_and_preprocess(ctx, cfg.train_dataset); });

  struct Pending {
    SeedResult result;
    Trained trained;
    EpochSet test;
  };
  std::vector<Pending> pending;
  for (std::uint64_t seed : cfg.seeds) {
    Pending p;
    p.result.seed = seed;
    const fs::path dir = ctx.run_dir / fmt::format("seed-{}", seed);
    fs::create_directories(dir);
    EpochSet train = train_all;
    if (cfg.mode == Mode::SingleDataset) {
      auto split = ctx.stage("preprocess", [&] { return split_by_subject(train_all, cfg.test_fraction, stage_seed(seed, "split")); });
      train = std::move(split.train);
      p.test = std::move(split.test);
    }
    std::optional<EpochSet> generated;
    if (cfg.use_fusion || cfg.use_pruning) {
      const GanPair gans = train_gans(ctx, train, seed, dir, p.result);
      generated = ctx.stage("generate", [&] {
        return augment::generate_for(train, gans.hc, gans.pd, {cfg.delta, stage_seed(seed, "generate")});
      });
      if (const auto ae = train_quality_model(ctx, train, seed, dir, p.result)) {
        quality_gate(ctx, *ae, *generated, train, dir, p.result);
      }
    }
    p.trained = fit_downstream(ctx, train, generated ? &*generated : nullptr, seed, dir, p.result);
    pending.push_back(std::move(p));
  }

  // Every model is fitted before any test data is opened.
  if (cfg.mode == Mode::CrossDataset) {
    const EpochSet test = ctx.stage("evaluate", [&] { return load_and_preprocess(ctx, cfg.test_dataset); });
    for (auto& p : pending) p.test = test;
  }
  ExperimentReport report;
  report.config = cfg;
  report.run_dir = ctx.run_dir;
  for (auto& p : pending) {
    p.result.metrics = evaluate_on(ctx, *p.trained.model, p.trained.mask, p.test, p.result);
    report.seeds.push_back(std::move(p.result));
  }
  report.summary = summarize(report.seeds);
  report.warnings = ctx.warnings;
  report.artifacts = {{"config", "config.ini"}, {"metrics", "metrics.csv"}, {"timings", "timings.json"}};
  write_metrics_csv(ctx.run_dir / "metrics.csv", report.seeds, report.summary);
  report.timings_s = ctx.timings;
  write_run_files(ctx, to_json(report));
  ctx.log("run", fmt::format("accuracy {:.4f} +/- {:.4f}, f1 {:.4f} +/- {:.4f}", report.summary.accuracy_mean,
                             report.summary.accuracy_std, report.summary.f1_mean, report.summary.f1_std));
  return report;
}

// ---------------------------------------------------------------------------
// Delta sweep
// ---------------------------------------------------------------------------

nlohmann::json to_json(const SweepReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& s : row.seeds) seeds.push_back(seed_json(s));
    rows.push_back({{"delta", row.delta}, {"summary", summary_json(row.summary)}, {"seeds", seeds}});
  }
  return {{"kind", "sweep"}, {"config", to_json(r.config)}, {"rows", rows}, {"warnings", r.warnings}};
}

SweepReport sweep_delta(const ExperimentConfig& base, const std::vector<double>& deltas, const RunOptions& options) {
  if (deltas.empty()) throw std::invalid_argument("sweep: at least one delta is required");
  for (double d : deltas) {
    if (!(d > 0.0)) throw std::invalid_argument(fmt::format("sweep: delta {} must be positive", d));
  }
  ExperimentConfig cfg = base;
  cfg.use_fusion = true;
  cfg.delta = deltas.front();
  cfg.validate();
  make_classifier(cfg);
  Context ctx{cfg, options, next_run_dir(options.output_root.value_or(default_output_root()), cfg.name + "-sweep"),
              {}, {}};
  const EpochSet train_all = ctx.stage("preprocess", [&] { return load_and_preprocess(ctx, cfg.train_dataset); });

  struct Pending {
    std::size_t row;
    SeedResult result;
    Trained trained;
    const EpochSet* test;
  };
  std::vector<Pending> pending;
  std::vector<EpochSet> split_tests;
  split_tests.reserve(cfg.seeds.size());
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path seed_dir = ctx.run_dir / fmt::format("seed-{}", seed);
    fs::create_directories(seed_dir);
    EpochSet train = train_all;
    const EpochSet* test = nullptr;
    if (cfg.mode == Mode::SingleDataset) {
      auto split = ctx.stage("preprocess", [&] { return split_by_subject(train_all, cfg.test_fraction, stage_seed(seed, "split")); });
      train = std::move(split.train);
      split_tests.push_back(std::move(split.test));
      test = &split_tests.back();
    }
    SeedResult shared;
    shared.seed = seed;
    const GanPair gans = train_gans(ctx, train, seed, seed_dir, shared);
    const auto ae = train_quality_model(ctx, train, seed, seed_dir, shared);
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      ExperimentConfig dcfg = cfg;
      dcfg.delta = deltas[i];
      Context dctx{dcfg, options, ctx.run_dir, {}, {}};
      const fs::path dir = seed_dir / fmt::format("delta-{}", deltas[i]);
      fs::create_directories(dir);
      Pending p{i, shared, {}, test};
      const EpochSet generated = dctx.stage("generate", [&] {
        return augment::generate_for(train, gans.hc, gans.pd, {deltas[i], stage_seed(seed, "generate")});
      });
      if (ae) quality_gate(dctx, *ae, generated, train, dir, p.result);
      p.trained = fit_downstream(dctx, train, &generated, seed, dir, p.result);
      for (auto& w : dctx.warnings) ctx.warnings.push_back(fmt::format("delta {}: {}", deltas[i], w));
      for (const auto& [k, v] : dctx.timings) ctx.timings[k] += v;
      pending.push_back(std::move(p));
    }
  }

  EpochSet cross_test;
  if (cfg.mode == Mode::CrossDataset) {
    cross_test = ctx.stage("evaluate", [&] { return load_and_preprocess(ctx, cfg.test_dataset); });
  }
  SweepReport report;
  report.config = cfg;
  report.run_dir = ctx.run_dir;
  for (double d : deltas) report.rows.push_back({d, {}, {}});
  for (auto& p : pending) {
    const EpochSet& test = p.test ? *p.test : cross_test;
    p.result.metrics = evaluate_on(ctx, *p.trained.model, p.trained.mask, test, p.result);
    report.rows[p.row].seeds.push_back(std::move(p.result));
  }
  std::string csv = "delta,accuracy_mean,accuracy_std,f1_mean,f1_std,seeds\n";
  std::string seeds_csv = "delta,seed,accuracy,f1\n";
  for (auto& row : report.rows) {
    row.summary = summarize(row.seeds);
    csv += fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{}\n", row.delta, row.summary.accuracy_mean,
                       row.summary.accuracy_std, row.summary.f1_mean, row.summary.f1_std, row.seeds.size());
    for (const auto& s : row.seeds) {
      seeds_csv += fmt::format("{},{},{:.17g},{:.17g}\n", row.delta, s.seed, s.metrics.accuracy, s.metrics.f1);
    }
  }
  report.warnings = ctx.warnings;
  write_text(ctx.run_dir / "sweep.csv", csv);
  write_text(ctx.run_dir / "sweep_seeds.csv", seeds_csv);
  write_sweep_svg(ctx.run_dir / "sweep.svg", report);
  write_run_files(ctx, to_json(report));
  return report;
}

void write_sweep_svg(const fs::path& path, const SweepReport& r) {
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 110, kTop = 40, kBottom = 50;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  double dmin = r.rows.front().delta, dmax = dmin;
  for (const auto& row : r.rows) {
    dmin = std::min(dmin, row.delta);
    dmax = std::max(dmax, row.delta);
  }
  if (dmax - dmin <= 0.0) {
    dmin -= 0.5;
    dmax += 0.5;
  }
  auto x = [&](double d) { return kLeft + pw * (d - dmin) / (dmax - dmin); };
  auto y = [&](double v) { return kTop + ph * (1.0 - std::clamp(v, 0.0, 1.0)); };

  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" "
      "font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      kW, kH);
  svg += fmt::format("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                     kLeft + pw / 2, "accuracy and F1 against fusion scale");
  svg += fmt::format("<line x1=\"{0}\" x2=\"{1}\" y1=\"{2}\" y2=\"{2}\" stroke=\"black\"/>\n", kLeft, kLeft + pw,
                     kTop + ph);
  svg += fmt::format("<line x1=\"{0}\" x2=\"{0}\" y1=\"{1}\" y2=\"{2}\" stroke=\"black\"/>\n", kLeft, kTop, kTop + ph);
  for (int t = 0; t <= 4; ++t) {
    svg += fmt::format("<text x=\"{}\" y=\"{:.2f}\" text-anchor=\"end\">{:.2f}</text>\n", kLeft - 6, y(t / 4.0) + 4,
                       t / 4.0);
  }
  for (const auto& row : r.rows) {
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", x(row.delta), kTop + ph + 18,
                       row.delta);
  }
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">delta</text>\n", kLeft + pw / 2, kH - 10);
  const std::pair<const char*, const char*> series[] = {{"accuracy", "#4c72b0"}, {"F1", "#dd8452"}};
  for (std::size_t s = 0; s < 2; ++s) {
    std::string points;
    for (const auto& row : r.rows) {
      const double v = s == 0 ? row.summary.accuracy_mean : row.summary.f1_mean;
      points += fmt::format("{:.2f},{:.2f} ", x(row.delta), y(v));
      svg += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\"/>\n", x(row.delta), y(v),
                         series[s].second);
    }
    svg += fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n", trim(points),
                       series[s].second);
    svg += fmt::format("<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n", kLeft + pw + 12, kTop + 16 + 18 * s,
                       series[s].second, series[s].first);
  }
  svg += "</svg>\n";
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text(path, svg);
}

}  // namespace gepd::harness
