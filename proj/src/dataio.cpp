#include "gepd/dataio.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fftw3.h>
#include <fmt/format.h>

namespace gepd::dataio {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

std::string to_string(ZScoreScope scope) {
  return scope == ZScoreScope::PerEpochChannel ? "per_epoch_channel" : "per_recording_channel";
}

ZScoreScope parse_zscore_scope(std::string_view text) {
  if (text == "per_epoch_channel") return ZScoreScope::PerEpochChannel;
  if (text == "per_recording_channel") return ZScoreScope::PerRecordingChannel;
  throw std::invalid_argument(fmt::format("unknown zscore scope '{}'", text));
}

void PreprocessConfig::validate(double sampling_rate) const {
  if (!(band_low_hz > 0.0 && band_low_hz < band_high_hz && band_high_hz < sampling_rate / 2.0)) {
    throw std::invalid_argument(fmt::format(
        "band {}-{} Hz is invalid for sampling rate {} Hz (need 0 < low < high < rate/2)", band_low_hz,
        band_high_hz, sampling_rate));
  }
  if (filter_taps == 0 || filter_taps % 2 == 0) {
    throw std::invalid_argument(fmt::format("filter_taps must be a positive odd integer, got {}", filter_taps));
  }
  if (!(epoch_length_s > 0.0)) throw std::invalid_argument("epoch_length_s must be positive");
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  if (boost::algorithm::trim_copy(text).empty()) return out;
  boost::algorithm::split(out, text, boost::algorithm::is_any_of(","));
  for (auto& s : out) boost::algorithm::trim(s);
  return out;
}

constexpr std::string_view kSubjectPrefix = "subject.";

}  // namespace

Manifest read_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw DataError(fmt::format("manifest '{}' not found", path.string()));
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw DataError(fmt::format("manifest '{}': {}", path.string(), e.what()));
  }
  Manifest m;
  const auto dataset = tree.find("dataset");
  if (dataset == tree.not_found()) {
    throw DataError(fmt::format("manifest '{}': missing [dataset] section", path.string()));
  }
  const pt::ptree& ds = dataset->second;
  m.name = ds.get<std::string>("name", path.stem().string());
  try {
    m.sampling_rate = ds.get<double>("sampling_rate");
  } catch (const pt::ptree_error&) {
    throw DataError(fmt::format("manifest '{}': missing or invalid sampling_rate", path.string()));
  }
  m.layout.names = split_list(ds.get<std::string>("channels", ""));
  if (m.layout.names.empty()) throw DataError(fmt::format("manifest '{}': no channels declared", path.string()));
  if (auto ref = ds.get_optional<std::string>("reference"); ref && !ref->empty()) m.layout.reference = *ref;
  m.layout.validate();

  for (const auto& [key, section] : tree) {
    if (!key.starts_with(kSubjectPrefix)) continue;
    SubjectEntry s;
    s.subject_id = key.substr(kSubjectPrefix.size());
    const auto label = section.get<std::string>("label", "");
    try {
      s.label = parse_label(label);
    } catch (const DataError& e) {
      throw DataError(fmt::format("{}: {}", s.subject_id, e.what()));
    }
    s.path = section.get<std::string>("path", "");
    if (s.path.empty()) throw DataError(fmt::format("{}: missing signal path", s.subject_id));
    m.subjects.push_back(std::move(s));
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write manifest '{}'", path.string()));
  out << "[dataset]\n";
  out << "name = " << m.name << "\n";
  out << fmt::format("sampling_rate = {}\n", m.sampling_rate);
  out << "channels = " << fmt::format("{}", fmt::join(m.layout.names, ", ")) << "\n";
  if (m.layout.reference) out << "reference = " << *m.layout.reference << "\n";
  for (const auto& s : m.subjects) {
    out << "\n[subject." << s.subject_id << "]\n";
    out << "label = " << to_string(s.label) << "\n";
    out << "path = " << s.path << "\n";
  }
}

// ---------------------------------------------------------------------------
// Signal files
// ---------------------------------------------------------------------------

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("unexpected end of signal file");
  return to_little(v);
}

}  // namespace

void write_signal_f32(const fs::path& path, const Tensor& samples, double sampling_rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  out.write(kSignalMagic, sizeof(kSignalMagic));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(samples.dim(0)));
  put<std::uint32_t>(out, 0);
  put<std::uint64_t>(out, samples.dim(1));
  put<double>(out, sampling_rate);
  for (double v : samples.values()) put<float>(out, static_cast<float>(v));
}

RawSignal read_signal_f32(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path.string()));
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kSignalMagic, 8) != 0) {
    throw DataError(fmt::format("'{}' is not a GEPDSIG1 signal file", path.string()));
  }
  const auto channels = get<std::uint32_t>(in);
  get<std::uint32_t>(in);
  const auto length = get<std::uint64_t>(in);
  RawSignal sig;
  sig.sampling_rate = get<double>(in);
  sig.samples = Tensor({channels, static_cast<std::size_t>(length)});
  for (double& v : sig.samples.values()) v = get<float>(in);
  return sig;
}

void write_signal_csv(const fs::path& path, const Tensor& samples, std::span<const std::string> names) {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  const std::size_t c = samples.dim(0), t = samples.dim(1);
  out << fmt::format("{}\n", fmt::join(names, ","));
  for (std::size_t j = 0; j < t; ++j) {
    for (std::size_t i = 0; i < c; ++i) {
      if (i) out << ',';
      out << fmt::format("{}", samples[i * t + j]);
    }
    out << '\n';
  }
}

Tensor read_signal_csv(const fs::path& path, std::span<const std::string> expected) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path.string()));
  std::string line;
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> column_of(expected.size());
  std::size_t width = 0;
  bool first = true;
  bool has_header = false;
  while (std::getline(in, line)) {
    boost::algorithm::trim(line);
    if (line.empty()) continue;
    std::vector<std::string> cells;
    boost::algorithm::split(cells, line, boost::algorithm::is_any_of(","));
    if (first) {
      first = false;
      double probe = 0.0;
      auto cell = boost::algorithm::trim_copy(cells[0]);
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), probe);
      if (ec != std::errc() || ptr != cell.data() + cell.size()) {
        for (auto& c : cells) boost::algorithm::trim(c);
        for (std::size_t k = 0; k < expected.size(); ++k) {
          const auto it = std::find(cells.begin(), cells.end(), expected[k]);
          if (it == cells.end()) {
            throw DataError(fmt::format("'{}': header lacks channel '{}'", path.string(), expected[k]));
          }
          column_of[k] = static_cast<std::size_t>(it - cells.begin());
        }
        width = cells.size();
        has_header = true;
        continue;
      }
    }
    if (width == 0) width = cells.size();
    if (cells.size() != width) {
      throw DataError(fmt::format("'{}': row {} has {} columns, expected {}", path.string(), rows.size() + 1,
                                  cells.size(), width));
    }
    std::vector<double> row(cells.size());
    for (std::size_t k = 0; k < cells.size(); ++k) {
      auto cell = boost::algorithm::trim_copy(cells[k]);
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), row[k]);
      if (ec != std::errc() || ptr != cell.data() + cell.size()) {
        if (cell == "nan" || cell == "NaN" || cell == "inf" || cell == "-inf") {
          row[k] = cell == "inf" ? INFINITY : (cell == "-inf" ? -INFINITY : NAN);
        } else {
          throw DataError(fmt::format("'{}': unparsable value '{}'", path.string(), cell));
        }
      }
    }
    rows.push_back(std::move(row));
  }
  // Without a header every column is returned; the caller reports channel-count mismatches.
  const std::size_t channels = has_header ? expected.size() : width;
  Tensor out({channels, rows.size()});
  for (std::size_t j = 0; j < rows.size(); ++j) {
    for (std::size_t i = 0; i < channels; ++i) out[i * rows.size() + j] = rows[j][has_header ? column_of[i] : i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

std::vector<Recording> load_dataset(const fs::path& manifest_path, const LoadOptions& options) {
  if (options.access_log) options.access_log->record("manifest:" + manifest_path.string());
  const Manifest m = read_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  std::vector<Recording> out;
  out.reserve(m.subjects.size());
  for (const auto& s : m.subjects) {
    const fs::path file = base / s.path;
    if (!fs::exists(file)) {
      throw DataError(fmt::format("{}: signal file '{}' not found", s.subject_id, file.string()));
    }
    if (options.access_log) options.access_log->record("signal:" + file.string());
    Recording r;
    r.subject_id = s.subject_id;
    r.label = s.label;
    r.layout = m.layout;
    r.sampling_rate = m.sampling_rate;
    try {
      if (file.extension() == ".csv") {
        r.samples = read_signal_csv(file, m.layout.names);
      } else {
        RawSignal sig = read_signal_f32(file);
        r.samples = std::move(sig.samples);
        r.sampling_rate = sig.sampling_rate;
      }
    } catch (const DataError& e) {
      throw DataError(fmt::format("{}: {}", s.subject_id, e.what()));
    }
    if (r.channels() != m.layout.size()) {
      throw DataError(fmt::format("{}: signal has {} channels but the manifest declares {}", s.subject_id,
                                  r.channels(), m.layout.size()));
    }
    r.validate();
    if (options.target_rate_hz && std::abs(*options.target_rate_hz - r.sampling_rate) > 1e-9) {
      r = resample(r, *options.target_rate_hz);
    }
    out.push_back(std::move(r));
  }
  return out;
}

fs::path write_dataset(const fs::path& dir, const std::string& name, std::span<const Recording> recordings,
                       bool csv) {
  fs::create_directories(dir);
  Manifest m;
  m.name = name;
  if (!recordings.empty()) {
    m.sampling_rate = recordings.front().sampling_rate;
    m.layout = recordings.front().layout;
  }
  for (const auto& r : recordings) {
    if (r.layout != m.layout || r.sampling_rate != m.sampling_rate) {
      throw DataError(fmt::format("{}: layout or rate differs from the rest of the dataset", r.subject_id));
    }
    const std::string file = r.subject_id + (csv ? ".csv" : ".f32");
    if (csv) {
      write_signal_csv(dir / file, r.samples, r.layout.names);
    } else {
      write_signal_f32(dir / file, r.samples, r.sampling_rate);
    }
    m.subjects.push_back({r.subject_id, r.label, file});
  }
  const fs::path manifest = dir / "manifest.ini";
  write_manifest(manifest, m);
  return manifest;
}

// ---------------------------------------------------------------------------
// Channel operations
// ---------------------------------------------------------------------------

Recording rereference(const Recording& r, const std::string& reference) {
  const auto ref = r.layout.index_of(reference);
  if (!ref) throw DataError(fmt::format("{}: unknown reference channel '{}'", r.subject_id, reference));
  const std::size_t c = r.channels(), t = r.length();
  Recording out = r;
  out.layout.names.clear();
  out.layout.reference = reference;
  out.samples = Tensor({c - 1, t});
  const double* ref_row = r.samples.data() + *ref * t;
  std::size_t row = 0;
  for (std::size_t i = 0; i < c; ++i) {
    if (i == *ref) continue;
    out.layout.names.push_back(r.layout.names[i]);
    const double* src = r.samples.data() + i * t;
    double* dst = out.samples.data() + row * t;
    for (std::size_t j = 0; j < t; ++j) dst[j] = src[j] - ref_row[j];
    ++row;
  }
  return out;
}

Recording select_channels(const Recording& r, std::span<const std::string> names) {
  const std::size_t t = r.length();
  Recording out = r;
  out.layout.names.assign(names.begin(), names.end());
  out.samples = Tensor({names.size(), t});
  for (std::size_t k = 0; k < names.size(); ++k) {
    const auto i = r.layout.index_of(names[k]);
    if (!i) throw DataError(fmt::format("{}: channel '{}' not present", r.subject_id, names[k]));
    std::copy_n(r.samples.data() + *i * t, t, out.samples.data() + k * t);
  }
  return out;
}

Harmonized harmonize(std::span<const Recording> a, std::span<const Recording> b) {
  auto layout_of = [](std::span<const Recording> rs, const char* which) {
    if (rs.empty()) return ChannelLayout{};
    for (const auto& r : rs) {
      if (r.layout.names != rs.front().layout.names) {
        throw DataError(fmt::format("{}: layout differs within dataset {}", r.subject_id, which));
      }
    }
    return rs.front().layout;
  };
  const ChannelLayout la = layout_of(a, "a");
  const ChannelLayout lb = layout_of(b, "b");
  Harmonized h;
  const std::set<std::string> in_b(lb.names.begin(), lb.names.end());
  for (const auto& n : la.names) {
    if (in_b.contains(n)) h.shared.names.push_back(n);
  }
  if (h.shared.names.empty()) throw DataError("harmonize: datasets share no channels");
  if (la.reference && la.reference == lb.reference) h.shared.reference = la.reference;
  for (const auto& r : a) h.a.push_back(select_channels(r, h.shared.names));
  for (const auto& r : b) h.b.push_back(select_channels(r, h.shared.names));
  return h;
}

// ---------------------------------------------------------------------------
// Filtering and resampling
// ---------------------------------------------------------------------------

namespace {

double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

std::vector<double> hamming_window(std::size_t taps) {
  std::vector<double> w(taps, 1.0);
  if (taps == 1) return w;
  for (std::size_t n = 0; n < taps; ++n) {
    w[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(taps - 1));
  }
  return w;
}

std::vector<double> design_lowpass(std::size_t taps, double cutoff_hz, double sampling_rate) {
  if (taps == 0) throw std::invalid_argument("design_lowpass: taps must be positive");
  const double fc = cutoff_hz / sampling_rate;
  const double mid = static_cast<double>(taps - 1) / 2.0;
  const auto w = hamming_window(taps);
  std::vector<double> h(taps);
  double sum = 0.0;
  for (std::size_t n = 0; n < taps; ++n) {
    h[n] = 2.0 * fc * sinc(2.0 * fc * (static_cast<double>(n) - mid)) * w[n];
    sum += h[n];
  }
  for (double& v : h) v /= sum;
  return h;
}

std::vector<double> design_bandpass(std::size_t taps, double low_hz, double high_hz, double sampling_rate) {
  if (taps == 0 || taps % 2 == 0) throw std::invalid_argument("design_bandpass: taps must be odd");
  const double f1 = low_hz / sampling_rate;
  const double f2 = high_hz / sampling_rate;
  const double mid = static_cast<double>(taps - 1) / 2.0;
  const auto w = hamming_window(taps);
  std::vector<double> h(taps);
  for (std::size_t n = 0; n < taps; ++n) {
    const double m = static_cast<double>(n) - mid;
    h[n] = (2.0 * f2 * sinc(2.0 * f2 * m) - 2.0 * f1 * sinc(2.0 * f1 * m)) * w[n];
  }
  const double centre = 0.5 * (f1 + f2);
  double gain = 0.0;
  for (std::size_t n = 0; n < taps; ++n) {
    gain += h[n] * std::cos(2.0 * std::numbers::pi * centre * (static_cast<double>(n) - mid));
  }
  for (double& v : h) v /= gain;
  return h;
}

std::vector<double> filter_zero_phase(std::span<const double> signal, std::span<const double> taps) {
  const std::size_t n = signal.size(), k = taps.size();
  if (k % 2 == 0) throw std::invalid_argument("filter_zero_phase: taps must be odd");
  if (k > n) {
    throw std::invalid_argument(
        fmt::format("filter of {} taps exceeds signal length {}", k, n));
  }
  const std::size_t half = (k - 1) / 2;
  // Reflect-extend without repeating the edge sample.
  std::vector<double> padded(n + 2 * half);
  for (std::size_t i = 0; i < half; ++i) {
    padded[half - 1 - i] = signal[std::min(i + 1, n - 1)];
    padded[half + n + i] = signal[n >= i + 2 ? n - 2 - i : 0];
  }
  std::copy(signal.begin(), signal.end(), padded.begin() + static_cast<std::ptrdiff_t>(half));

  const std::size_t len = next_pow2(padded.size() + k - 1);
  const std::size_t bins = len / 2 + 1;
  double* in = fftw_alloc_real(len);
  fftw_complex* spec_x = fftw_alloc_complex(bins);
  fftw_complex* spec_h = fftw_alloc_complex(bins);
  fftw_plan fwd = fftw_plan_dft_r2c_1d(static_cast<int>(len), in, spec_x, FFTW_ESTIMATE);
  fftw_plan inv = fftw_plan_dft_c2r_1d(static_cast<int>(len), spec_x, in, FFTW_ESTIMATE);

  std::fill(in, in + len, 0.0);
  std::copy(taps.begin(), taps.end(), in);
  fftw_execute(fwd);
  std::memcpy(spec_h, spec_x, bins * sizeof(fftw_complex));

  std::fill(in, in + len, 0.0);
  std::copy(padded.begin(), padded.end(), in);
  fftw_execute(fwd);
  for (std::size_t i = 0; i < bins; ++i) {
    const double re = spec_x[i][0] * spec_h[i][0] - spec_x[i][1] * spec_h[i][1];
    const double im = spec_x[i][0] * spec_h[i][1] + spec_x[i][1] * spec_h[i][0];
    spec_x[i][0] = re;
    spec_x[i][1] = im;
  }
  fftw_execute(inv);
  std::vector<double> out(n);
  const double scale = 1.0 / static_cast<double>(len);
  for (std::size_t i = 0; i < n; ++i) out[i] = in[i + 2 * half] * scale;

  fftw_destroy_plan(fwd);
  fftw_destroy_plan(inv);
  fftw_free(in);
  fftw_free(spec_x);
  fftw_free(spec_h);
  return out;
}

Recording bandpass(const Recording& r, const PreprocessConfig& cfg) {
  cfg.validate(r.sampling_rate);
  if (cfg.filter_taps > r.length()) {
    throw DataError(fmt::format("{}: filter of {} taps exceeds signal length {}", r.subject_id,
                                cfg.filter_taps, r.length()));
  }
  const auto taps = design_bandpass(cfg.filter_taps, cfg.band_low_hz, cfg.band_high_hz, r.sampling_rate);
  Recording out = r;
  const std::size_t t = r.length();
  for (std::size_t c = 0; c < r.channels(); ++c) {
    const auto y = filter_zero_phase(std::span<const double>(r.samples.data() + c * t, t), taps);
    std::copy(y.begin(), y.end(), out.samples.data() + c * t);
  }
  return out;
}

std::vector<double> resample_poly(std::span<const double> signal, std::size_t up, std::size_t down) {
  if (up == 0 || down == 0) throw std::invalid_argument("resample_poly: factors must be positive");
  const std::size_t g = std::gcd(up, down);
  up /= g;
  down /= g;
  if (up == 1 && down == 1) return {signal.begin(), signal.end()};
  const std::size_t n = signal.size();
  const std::size_t max_factor = std::max(up, down);
  const std::size_t half = 10 * max_factor;
  const std::size_t taps = 2 * half + 1;
  // Cut-off at the lower of the two Nyquist rates, expressed in the upsampled domain.
  auto h = design_lowpass(taps, 0.5 / static_cast<double>(max_factor), 1.0);
  for (double& v : h) v *= static_cast<double>(up);
  const std::size_t out_len = (n * up + down - 1) / down;
  std::vector<double> out(out_len, 0.0);
  for (std::size_t m = 0; m < out_len; ++m) {
    // Position in the upsampled stream, centred on the filter delay.
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(m * down + half);
    double s = 0.0;
    // Taps k with (p - k) divisible by up.
    std::ptrdiff_t k0 = p % static_cast<std::ptrdiff_t>(up);
    for (std::ptrdiff_t k = k0; k < static_cast<std::ptrdiff_t>(taps); k += static_cast<std::ptrdiff_t>(up)) {
      const std::ptrdiff_t idx = (p - k) / static_cast<std::ptrdiff_t>(up);
      if (idx < 0) break;
      if (idx < static_cast<std::ptrdiff_t>(n)) s += h[static_cast<std::size_t>(k)] * signal[static_cast<std::size_t>(idx)];
    }
    out[m] = s;
  }
  return out;
}

Recording resample(const Recording& r, double target_rate_hz) {
  if (!(target_rate_hz > 0.0)) throw std::invalid_argument("resample: target rate must be positive");
  const auto to_milli = [](double hz) { return static_cast<std::size_t>(std::llround(hz * 1000.0)); };
  const std::size_t src = to_milli(r.sampling_rate), dst = to_milli(target_rate_hz);
  const std::size_t g = std::gcd(src, dst);
  const std::size_t up = dst / g, down = src / g;
  if (up > 4096 || down > 4096) {
    throw DataError(fmt::format("{}: cannot resample {} Hz to {} Hz with a small rational factor",
                                r.subject_id, r.sampling_rate, target_rate_hz));
  }
  Recording out = r;
  out.sampling_rate = target_rate_hz;
  const std::size_t t = r.length();
  std::vector<std::vector<double>> rows;
  for (std::size_t c = 0; c < r.channels(); ++c) {
    rows.push_back(resample_poly(std::span<const double>(r.samples.data() + c * t, t), up, down));
  }
  const std::size_t len = rows.empty() ? 0 : rows.front().size();
  out.samples = Tensor({r.channels(), len});
  for (std::size_t c = 0; c < rows.size(); ++c) std::copy(rows[c].begin(), rows[c].end(), out.samples.data() + c * len);
  return out;
}

// ---------------------------------------------------------------------------
// Epoching and normalisation
// ---------------------------------------------------------------------------

EpochSet epoch(const Recording& r, const PreprocessConfig& cfg) {
  const auto es = static_cast<std::size_t>(std::llround(cfg.epoch_length_s * r.sampling_rate));
  if (es == 0) throw std::invalid_argument("epoch: epoch length rounds to zero samples");
  const std::size_t t = r.length(), c = r.channels();
  const std::size_t n = t / es;
  if (n == 0) {
    throw DataError(fmt::format("{}: recording of {} samples is shorter than one epoch ({} samples)",
                                r.subject_id, t, es));
  }
  EpochSet e;
  e.layout = r.layout;
  e.epoch_length_s = cfg.epoch_length_s;
  e.sampling_rate = r.sampling_rate;
  e.epochs = Tensor({n, c, es});
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::copy_n(r.samples.data() + ch * t + k * es, es, e.epochs.data() + (k * c + ch) * es);
    }
  }
  e.labels.assign(n, r.label);
  e.provenance.assign(n, Provenance::Real);
  e.subjects.assign(n, r.subject_id);
  return e;
}

EpochSet zscore(const EpochSet& e, const PreprocessConfig& cfg, std::vector<std::string>* warnings) {
  EpochSet out = e;
  const std::size_t n = e.count(), c = e.channels(), t = e.samples();
  auto standardise = [&](const std::vector<std::size_t>& epochs_in_group, std::size_t ch,
                         const std::string& what) {
    double sum = 0.0;
    for (std::size_t k : epochs_in_group) {
      const double* x = e.epochs.data() + (k * c + ch) * t;
      for (std::size_t j = 0; j < t; ++j) sum += x[j];
    }
    const double count = static_cast<double>(epochs_in_group.size() * t);
    const double mean = sum / count;
    double ss = 0.0;
    for (std::size_t k : epochs_in_group) {
      const double* x = e.epochs.data() + (k * c + ch) * t;
      for (std::size_t j = 0; j < t; ++j) ss += (x[j] - mean) * (x[j] - mean);
    }
    const double sd = std::sqrt(ss / count);
    const bool flat = !(sd > 1e-12 * std::max(1.0, std::abs(mean)));
    if (flat && warnings) {
      warnings->push_back(fmt::format("{} channel {}: zero variance, set to zeros", what, e.layout.names[ch]));
    }
    for (std::size_t k : epochs_in_group) {
      const double* x = e.epochs.data() + (k * c + ch) * t;
      double* y = out.epochs.data() + (k * c + ch) * t;
      for (std::size_t j = 0; j < t; ++j) y[j] = flat ? 0.0 : (x[j] - mean) / sd;
    }
  };
  if (cfg.zscore_scope == ZScoreScope::PerEpochChannel) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        standardise({k}, ch, fmt::format("epoch {} ({})", k, e.subjects.empty() ? "" : e.subjects[k]));
      }
    }
  } else {
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t k = 0; k < n; ++k) groups[e.subjects.at(k)].push_back(k);
    for (const auto& [subject, members] : groups) {
      for (std::size_t ch = 0; ch < c; ++ch) standardise(members, ch, fmt::format("recording {}", subject));
    }
  }
  return out;
}

EpochSet preprocess(std::span<const Recording> recordings, const PreprocessConfig& cfg,
                    std::vector<std::string>* warnings) {
  EpochSet all;
  for (const auto& raw : recordings) {
    Recording r = raw;
    if (!cfg.reference_channel.empty()) r = rereference(r, cfg.reference_channel);
    if (!cfg.channels.empty()) r = select_channels(r, cfg.channels);
    r = bandpass(r, cfg);
    all = concat(all, epoch(r, cfg));
  }
  return zscore(all, cfg, warnings);
}

// ---------------------------------------------------------------------------
// Synthetic populations
// ---------------------------------------------------------------------------

void SynthSpec::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("synth spec: " + msg); };
  if (n_channels == 0) fail("n_channels must be positive");
  if (!channel_names.empty() && channel_names.size() != n_channels) fail("channel_names length differs from n_channels");
  if (!(sampling_rate > 0.0)) fail("sampling_rate must be positive");
  if (!(duration_s > 0.0)) fail("duration_s must be positive");
  if (n_hc + n_pd == 0) fail("at least one subject required");
  for (std::size_t c : discriminative_channels) {
    if (c >= n_channels) fail(fmt::format("discriminative channel {} out of range", c));
  }
  if (effect_uv < 0.0 || background_uv < 0.0 || alpha_uv < 0.0) fail("amplitudes must be non-negative");
  if (!(std::abs(ar_coefficient) < 1.0)) fail("ar_coefficient must lie in (-1, 1)");
  const double nyquist = sampling_rate / 2.0;
  if (effect_freq_hz <= 0.0 || effect_freq_hz >= nyquist) fail("effect_freq_hz must lie below Nyquist");
  if (alpha_freq_hz + site.alpha_shift_hz <= 0.0 || alpha_freq_hz + site.alpha_shift_hz >= nyquist) {
    fail("alpha frequency must lie below Nyquist");
  }
  if (subject_jitter < 0.0) fail("subject_jitter must be non-negative");
  if (!(site.gain > 0.0)) fail("site gain must be positive");
}

std::vector<std::string> default_channel_names(std::size_t n) {
  static const char* kTenTwenty[] = {
      "Fp1", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F7",  "F5",  "F3",  "F1",  "Fz",  "F2",
      "F4",  "F6",  "F8",  "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8", "T7",
      "C5",  "C3",  "C1",  "Cz",  "C2",  "C4",  "C6",  "T8",  "TP7", "CP5", "CP3", "CP1", "CPz",
      "CP2", "CP4", "CP6", "TP8", "P7",  "P5",  "P3",  "P1",  "Pz",  "P2",  "P4",  "P6",  "P8",
      "PO7", "PO3", "POz", "PO4", "PO8", "O1",  "Oz",  "O2",  "FT9", "FT10", "TP9", "TP10"};
  constexpr std::size_t kKnown = sizeof(kTenTwenty) / sizeof(kTenTwenty[0]);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(i < kKnown ? std::string(kTenTwenty[i]) : fmt::format("E{:03d}", i + 1));
  }
  return out;
}

std::vector<Recording> synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const std::set<std::size_t> planted(spec.discriminative_channels.begin(), spec.discriminative_channels.end());
  const auto t = static_cast<std::size_t>(std::llround(spec.duration_s * spec.sampling_rate));
  const double dt = 1.0 / spec.sampling_rate;
  const double innovation = std::sqrt(1.0 - spec.ar_coefficient * spec.ar_coefficient);

  ChannelLayout layout;
  layout.names = spec.channel_names.empty() ? default_channel_names(spec.n_channels) : spec.channel_names;
  layout.validate();

  std::vector<Recording> out;
  const std::size_t total = spec.n_hc + spec.n_pd;
  for (std::size_t s = 0; s < total; ++s) {
    Recording r;
    r.subject_id = fmt::format("{}{:02d}", spec.subject_prefix, s + 1);
    r.label = s < spec.n_hc ? Label::HC : Label::PD;
    r.sampling_rate = spec.sampling_rate;
    r.layout = layout;
    r.samples = Tensor({spec.n_channels, t});
    const double subject_gain = std::max(0.1, 1.0 + spec.subject_jitter * normal(rng));
    const double alpha_freq = spec.alpha_freq_hz + spec.site.alpha_shift_hz + 0.5 * spec.subject_jitter * normal(rng);
    const double effect_gain = std::max(0.1, 1.0 + spec.subject_jitter * normal(rng));
    for (std::size_t c = 0; c < spec.n_channels; ++c) {
      double* x = r.samples.data() + c * t;
      const double alpha_amp = spec.alpha_uv * std::max(0.0, 1.0 + spec.subject_jitter * normal(rng));
      const double alpha_phase = phase(rng);
      const double effect_phase = phase(rng);
      const double line_phase = phase(rng);
      const bool carries_effect = r.label == Label::PD && planted.contains(c);
      double ar = normal(rng);
      for (std::size_t j = 0; j < t; ++j) {
        const double time = static_cast<double>(j) * dt;
        ar = spec.ar_coefficient * ar + innovation * normal(rng);
        double v = spec.background_uv * subject_gain * ar;
        v += alpha_amp * std::sin(2.0 * std::numbers::pi * alpha_freq * time + alpha_phase);
        if (carries_effect) {
          v += spec.effect_uv * effect_gain * std::sin(2.0 * std::numbers::pi * spec.effect_freq_hz * time + effect_phase);
        }
        v = spec.site.gain * v + spec.site.dc_offset_uv;
        if (spec.site.line_noise_uv > 0.0) {
          v += spec.site.line_noise_uv * std::sin(2.0 * std::numbers::pi * spec.site.line_freq_hz * time + line_phase);
        }
        if (spec.site.extra_noise_uv > 0.0) v += spec.site.extra_noise_uv * normal(rng);
        x[j] = v;
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace gepd::dataio
