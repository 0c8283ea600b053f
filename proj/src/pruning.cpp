#include "gepd/pruning.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <boost/algorithm/string.hpp>
#include <fmt/format.h>
#include <png.h>

namespace gepd::pruning {

namespace fs = std::filesystem;

namespace {

constexpr double kTieTolerance = 1e-12;

}  // namespace

void HistogramSpec::validate() const {
  if (bins < 2) throw std::invalid_argument(fmt::format("histogram bins must be >= 2, got {}", bins));
  if (!(epsilon > 0.0)) throw std::invalid_argument("histogram epsilon must be positive");
  if (fixed_range && !(fixed_range->first < fixed_range->second)) {
    throw std::invalid_argument("histogram range must satisfy lo < hi");
  }
}

std::vector<double> histogram_probs(std::span<const double> samples, std::size_t bins, double lo, double hi,
                                    double epsilon) {
  if (samples.empty()) throw DataError("histogram of an empty sample set");
  std::vector<double> counts(bins, 0.0);
  const double width = hi - lo;
  for (double x : samples) {
    std::size_t idx = 0;
    if (width > 0.0) {
      const double pos = std::floor((x - lo) / width * static_cast<double>(bins));
      idx = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
    }
    counts[idx] += 1.0;
  }
  const double n = static_cast<double>(samples.size());
  const double norm = 1.0 + static_cast<double>(bins) * epsilon;
  for (double& c : counts) c = (c / n + epsilon) / norm;
  return counts;
}

std::pair<double, double> channel_range(const EpochSet& epochs, std::size_t channel) {
  const std::size_t t = epochs.samples(), c = epochs.channels();
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t k = 0; k < epochs.count(); ++k) {
    const double* x = epochs.epochs.data() + (k * c + channel) * t;
    const auto [mn, mx] = std::minmax_element(x, x + t);
    lo = std::min(lo, *mn);
    hi = std::max(hi, *mx);
  }
  if (epochs.count() == 0) throw DataError("channel range of an empty epoch set");
  return {lo, hi};
}

ChannelDistribution estimate_distribution(const EpochSet& epochs, const GroupFilter& filter, std::size_t channel,
                                          const HistogramSpec& spec, std::pair<double, double> range) {
  spec.validate();
  if (channel >= epochs.channels()) throw std::out_of_range(fmt::format("channel index {} out of range", channel));
  const auto members = epochs.indices_where(filter.label, filter.provenance);
  if (members.empty()) {
    throw DataError(fmt::format("no epochs in group {} / {}", filter.label ? to_string(*filter.label) : "any",
                                filter.provenance ? to_string(*filter.provenance) : "any"));
  }
  const std::size_t t = epochs.samples(), c = epochs.channels();
  std::vector<double> pooled;
  pooled.reserve(members.size() * t);
  for (std::size_t k : members) {
    const double* x = epochs.epochs.data() + (k * c + channel) * t;
    pooled.insert(pooled.end(), x, x + t);
  }
  return {epochs.layout.names.at(channel),
          histogram_probs(pooled, spec.bins, range.first, range.second, spec.epsilon)};
}

ChannelDistribution estimate_distribution(const EpochSet& epochs, const GroupFilter& filter, std::size_t channel,
                                          const HistogramSpec& spec) {
  const auto range = spec.fixed_range ? *spec.fixed_range : channel_range(epochs, channel);
  return estimate_distribution(epochs, filter, channel, spec, range);
}

double kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw std::invalid_argument(fmt::format("kl: bin counts differ ({} vs {})", p.size(), q.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * std::log2(p[i] / q[i]);
  }
  return std::max(s, 0.0);
}

double js(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw std::invalid_argument(fmt::format("js: bin counts differ ({} vs {})", p.size(), q.size()));
  }
  // Summed symmetrically so js(p, q) == js(q, p) bit for bit.
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    double a = p[i] > 0.0 ? p[i] * std::log2(p[i] / m) : 0.0;
    double b = q[i] > 0.0 ? q[i] * std::log2(q[i] / m) : 0.0;
    if (a > b) std::swap(a, b);
    s += 0.5 * (a + b);
  }
  return std::clamp(s, 0.0, 1.0);
}

double kl(const ChannelDistribution& p, const ChannelDistribution& q) { return kl(p.probs, q.probs); }
double js(const ChannelDistribution& p, const ChannelDistribution& q) { return js(p.probs, q.probs); }

ColumnMeans SimilarityTable::means() const {
  ColumnMeans m;
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.hc_real_fake += r.js_hc_real_fake;
    m.pd_real_fake += r.js_pd_real_fake;
    m.real_hc_pd += r.js_real_hc_pd;
    m.fake_hc_pd += r.js_fake_hc_pd;
  }
  const double n = static_cast<double>(rows.size());
  m.hc_real_fake /= n;
  m.pd_real_fake /= n;
  m.real_hc_pd /= n;
  m.fake_hc_pd /= n;
  return m;
}

ColumnMeans SimilarityTable::means(std::span<const std::string> channels) const {
  SimilarityTable sub;
  for (const auto& name : channels) {
    const auto it = std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r.channel == name; });
    if (it == rows.end()) throw DataError(fmt::format("channel '{}' not in similarity table", name));
    sub.rows.push_back(*it);
  }
  return sub.means();
}

SimilarityTable similarity_table(const EpochSet& fusion, const HistogramSpec& spec) {
  spec.validate();
  for (Label l : {Label::HC, Label::PD}) {
    for (Provenance p : {Provenance::Real, Provenance::Generated}) {
      if (fusion.count_where(l, p) == 0) {
        throw DataError(fmt::format("similarity table needs every group; {} {} is empty", to_string(p), to_string(l)));
      }
    }
  }
  SimilarityTable table;
  for (std::size_t ch = 0; ch < fusion.channels(); ++ch) {
    const auto range = spec.fixed_range ? *spec.fixed_range : channel_range(fusion, ch);
    const auto rh = estimate_distribution(fusion, {Label::HC, Provenance::Real}, ch, spec, range);
    const auto rd = estimate_distribution(fusion, {Label::PD, Provenance::Real}, ch, spec, range);
    const auto gh = estimate_distribution(fusion, {Label::HC, Provenance::Generated}, ch, spec, range);
    const auto gd = estimate_distribution(fusion, {Label::PD, Provenance::Generated}, ch, spec, range);
    table.rows.push_back({fusion.layout.names[ch], js(rh, gh), js(rd, gd), js(rh, rd), js(gh, gd)});
  }
  return table;
}

std::string to_string(ThresholdBase v) { return v == ThresholdBase::PerGroupMean ? "per_group_mean" : "sum"; }
std::string to_string(Combine v) { return v == Combine::Intersection ? "intersection" : "union"; }
std::string to_string(BetaScope v) { return v == BetaScope::PerColumn ? "per_column" : "joint"; }

ThresholdBase parse_threshold_base(std::string_view text) {
  if (text == "per_group_mean") return ThresholdBase::PerGroupMean;
  if (text == "sum") return ThresholdBase::Sum;
  throw std::invalid_argument(fmt::format("unknown threshold base '{}'", text));
}

Combine parse_combine(std::string_view text) {
  if (text == "intersection") return Combine::Intersection;
  if (text == "union") return Combine::Union;
  throw std::invalid_argument(fmt::format("unknown combine mode '{}'", text));
}

BetaScope parse_beta_scope(std::string_view text) {
  if (text == "per_column") return BetaScope::PerColumn;
  if (text == "joint") return BetaScope::Joint;
  throw std::invalid_argument(fmt::format("unknown beta scope '{}'", text));
}

void PruneConfig::validate() const {
  if (!(alpha > 0.0) || !(beta > 0.0)) {
    throw std::invalid_argument(fmt::format("alpha and beta must be positive (got {}, {})", alpha, beta));
  }
}

Thresholds compute_thresholds(const SimilarityTable& table, const PruneConfig& cfg) {
  cfg.validate();
  if (table.rows.empty()) throw DataError("prune: empty similarity table");
  const ColumnMeans m = table.means();
  // Coefficient x 2 x mean, so 0.5 selects the mean itself; or coefficient x column sum.
  const double scale =
      cfg.threshold_base == ThresholdBase::PerGroupMean ? 2.0 : static_cast<double>(table.rows.size());
  Thresholds t;
  t.alpha_real = cfg.alpha * scale * m.real_hc_pd;
  t.alpha_fake = cfg.alpha * scale * m.fake_hc_pd;
  if (cfg.beta_scope == BetaScope::PerColumn) {
    t.beta_hc = cfg.beta * scale * m.hc_real_fake;
    t.beta_pd = cfg.beta * scale * m.pd_real_fake;
  } else {
    const double joint = 0.5 * (m.hc_real_fake + m.pd_real_fake);
    t.beta_hc = t.beta_pd = cfg.beta * scale * joint;
  }
  return t;
}

ChannelMask prune(const SimilarityTable& table, const PruneConfig& cfg) {
  ChannelMask mask;
  mask.thresholds = compute_thresholds(table, cfg);
  const Thresholds& t = mask.thresholds;
  for (const auto& r : table.rows) {
    ChannelTrace tr;
    tr.channel = r.channel;
    tr.hc_real_fake_ok = r.js_hc_real_fake <= t.beta_hc + kTieTolerance;
    tr.pd_real_fake_ok = r.js_pd_real_fake <= t.beta_pd + kTieTolerance;
    tr.real_hc_pd_ok = r.js_real_hc_pd >= t.alpha_real - kTieTolerance;
    tr.fake_hc_pd_ok = r.js_fake_hc_pd >= t.alpha_fake - kTieTolerance;
    const bool faithful = tr.hc_real_fake_ok && tr.pd_real_fake_ok;
    const bool discriminative = tr.real_hc_pd_ok && tr.fake_hc_pd_ok;
    tr.retained = cfg.combine == Combine::Intersection ? (faithful && discriminative) : (faithful || discriminative);
    if (tr.retained) mask.retained.push_back(r.channel);
    mask.trace.push_back(std::move(tr));
  }
  if (mask.retained.empty()) {
    throw DataError(fmt::format(
        "pruning retained no channels (alpha {}, beta {}, {}); lower alpha, raise beta or use union combination",
        cfg.alpha, cfg.beta, to_string(cfg.combine)));
  }
  return mask;
}

ChannelMask full_mask(const ChannelLayout& layout) {
  ChannelMask mask;
  mask.retained = layout.names;
  for (const auto& n : layout.names) mask.trace.push_back({n, true, true, true, true, true});
  return mask;
}

EpochSet apply_mask(const EpochSet& e, const ChannelMask& mask) {
  std::vector<std::size_t> idx;
  for (const auto& name : mask.retained) {
    const auto i = e.layout.index_of(name);
    if (!i) throw DataError(fmt::format("mask channel '{}' not in epoch layout", name));
    idx.push_back(*i);
  }
  EpochSet out = e;
  const std::size_t n = e.count(), c = e.channels(), t = e.samples();
  out.layout.names = mask.retained;
  out.epochs = Tensor({n, idx.size(), t});
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < idx.size(); ++j) {
      std::copy_n(e.epochs.data() + (k * c + idx[j]) * t, t, out.epochs.data() + (k * idx.size() + j) * t);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

void write_similarity_csv(const fs::path& path, const SimilarityTable& table, const ChannelMask& mask) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << "channel,js_hc_real_fake,js_pd_real_fake,js_real_hc_pd,js_fake_hc_pd,retained\n";
  for (const auto& r : table.rows) {
    const bool kept = std::find(mask.retained.begin(), mask.retained.end(), r.channel) != mask.retained.end();
    out << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{}\n", r.channel, r.js_hc_real_fake, r.js_pd_real_fake,
                       r.js_real_hc_pd, r.js_fake_hc_pd, kept ? 1 : 0);
  }
  if (!out) throw std::runtime_error(fmt::format("failed writing '{}'", path.string()));
}

ImportedSimilarity read_similarity_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path.string()));
  ImportedSimilarity out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    boost::algorithm::trim(line);
    if (line.empty()) continue;
    std::vector<std::string> cells;
    boost::algorithm::split(cells, line, boost::algorithm::is_any_of(","));
    if (cells.size() != 6) throw DataError(fmt::format("'{}': expected 6 columns, got {}", path.string(), cells.size()));
    SimilarityRow r{cells[0], std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4])};
    if (cells[5] == "1") out.retained.push_back(r.channel);
    out.table.rows.push_back(std::move(r));
  }
  return out;
}

namespace {

constexpr std::size_t kCell = 18;
constexpr std::size_t kGap = 2;
constexpr std::size_t kPanelGap = 12;

std::array<unsigned char, 3> colour(double v) {
  // Piecewise-linear approximation of a perceptual blue-green-yellow map.
  static constexpr std::array<std::array<double, 3>, 5> stops{{
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  v = std::clamp(v, 0.0, 1.0) * 4.0;
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(v), 3);
  const double f = v - static_cast<double>(i);
  std::array<unsigned char, 3> c{};
  for (std::size_t k = 0; k < 3; ++k) {
    c[k] = static_cast<unsigned char>(std::lround(stops[i][k] + f * (stops[i + 1][k] - stops[i][k])));
  }
  return c;
}

}  // namespace

Image render_heatmap(const SimilarityTable& table, const std::vector<bool>& retained) {
  const std::size_t n = table.rows.size();
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(std::max<std::size_t>(n, 1)))));
  const std::size_t rows = (std::max<std::size_t>(n, 1) + cols - 1) / cols;
  const std::size_t panel_w = cols * (kCell + kGap) + kGap;
  const std::size_t panel_h = rows * (kCell + kGap) + kGap;
  Image img;
  img.width = 4 * panel_w + 3 * kPanelGap;
  img.height = panel_h;
  img.rgb.assign(img.width * img.height * 3, 255);
  for (std::size_t panel = 0; panel < 4; ++panel) {
    for (std::size_t ch = 0; ch < n; ++ch) {
      const auto& r = table.rows[ch];
      const double v = panel == 0   ? r.js_hc_real_fake
                       : panel == 1 ? r.js_pd_real_fake
                       : panel == 2 ? r.js_real_hc_pd
                                    : r.js_fake_hc_pd;
      std::array<unsigned char, 3> c = colour(v);
      if (!retained.at(ch)) {
        const auto g = static_cast<unsigned char>(
            std::lround(0.5 * (0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]) + 0.5 * 200.0));
        c = {g, g, g};
      }
      const std::size_t x0 = panel * (panel_w + kPanelGap) + kGap + (ch % cols) * (kCell + kGap);
      const std::size_t y0 = kGap + (ch / cols) * (kCell + kGap);
      for (std::size_t y = y0; y < y0 + kCell; ++y) {
        for (std::size_t x = x0; x < x0 + kCell; ++x) {
          std::copy(c.begin(), c.end(), img.rgb.begin() + static_cast<std::ptrdiff_t>((y * img.width + x) * 3));
        }
      }
    }
  }
  return img;
}

void write_png(const fs::path& path, const Image& image) {
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error(fmt::format("libpng failed writing '{}'", path.string()));
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(image.rgb.data() + y * image.width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

ExportedFiles export_similarity(const SimilarityTable& table, const ChannelMask& mask, const fs::path& out_dir,
                                bool images) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error(fmt::format("cannot create '{}': {}", out_dir.string(), ec.message()));
  ExportedFiles files;
  files.csv = out_dir / "similarity.csv";
  write_similarity_csv(files.csv, table, mask);
  if (images) {
    std::vector<bool> all(table.rows.size(), true), kept(table.rows.size(), false);
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      kept[i] = std::find(mask.retained.begin(), mask.retained.end(), table.rows[i].channel) != mask.retained.end();
    }
    files.heatmap_before = out_dir / "heatmap_before.png";
    files.heatmap_after = out_dir / "heatmap_after.png";
    write_png(files.heatmap_before, render_heatmap(table, all));
    write_png(files.heatmap_after, render_heatmap(table, kept));
  }
  return files;
}

}  // namespace gepd::pruning
