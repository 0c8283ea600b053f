#include "gepd/types.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

namespace gepd {

std::string to_string(Label label) { return label == Label::HC ? "HC" : "PD"; }

std::string to_string(Provenance provenance) {
  return provenance == Provenance::Real ? "real" : "generated";
}

Label parse_label(std::string_view text) {
  if (text == "HC") return Label::HC;
  if (text == "PD") return Label::PD;
  throw DataError(fmt::format("unknown label '{}', expected HC or PD", text));
}

Provenance parse_provenance(std::string_view text) {
  if (text == "real") return Provenance::Real;
  if (text == "generated") return Provenance::Generated;
  throw DataError(fmt::format("unknown provenance '{}'", text));
}

std::optional<std::size_t> ChannelLayout::index_of(std::string_view name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names.begin());
}

void ChannelLayout::validate() const {
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (!seen.insert(n).second) throw DataError(fmt::format("duplicate channel name '{}'", n));
  }
  if (reference && seen.contains(*reference)) {
    throw DataError(fmt::format("reference channel '{}' is also listed as a data channel", *reference));
  }
}

void Recording::validate() const {
  layout.validate();
  if (!(sampling_rate > 0.0)) throw DataError(fmt::format("{}: sampling rate must be positive", subject_id));
  if (samples.rank() != 2 || samples.dim(0) != layout.size()) {
    throw DataError(fmt::format("{}: sample matrix {} does not match {} declared channels", subject_id,
                                shape_string(samples.shape()), layout.size()));
  }
  for (double v : samples.values()) {
    if (!std::isfinite(v)) throw DataError(fmt::format("{}: non-finite sample value", subject_id));
  }
}

std::size_t EpochSet::samples() const {
  if (epochs.rank() == 3) return epochs.dim(2);
  return static_cast<std::size_t>(std::llround(epoch_length_s * sampling_rate));
}

void EpochSet::validate() const {
  layout.validate();
  if (epochs.rank() != 3) throw DataError("epoch set: epochs must be rank 3");
  if (epochs.dim(1) != layout.size()) {
    throw DataError(fmt::format("epoch set: {} channels but layout has {}", epochs.dim(1), layout.size()));
  }
  const auto expected = static_cast<std::size_t>(std::llround(epoch_length_s * sampling_rate));
  if (epochs.dim(2) != expected) {
    throw DataError(fmt::format("epoch set: {} samples per epoch, expected {}", epochs.dim(2), expected));
  }
  const std::size_t n = epochs.dim(0);
  if (labels.size() != n || provenance.size() != n || subjects.size() != n) {
    throw DataError("epoch set: per-epoch metadata length differs from epoch count");
  }
}

EpochSet EpochSet::empty_like() const {
  EpochSet out;
  out.epochs = Tensor({0, channels(), samples()});
  out.layout = layout;
  out.epoch_length_s = epoch_length_s;
  out.sampling_rate = sampling_rate;
  return out;
}

EpochSet EpochSet::subset(std::span<const std::size_t> indices) const {
  EpochSet out = empty_like();
  out.epochs = epochs.gather_rows(indices);
  for (std::size_t i : indices) {
    out.labels.push_back(labels.at(i));
    out.provenance.push_back(provenance.at(i));
    out.subjects.push_back(subjects.at(i));
  }
  return out;
}

std::vector<std::size_t> EpochSet::indices_where(std::optional<Label> label,
                                                 std::optional<Provenance> prov) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (label && labels[i] != *label) continue;
    if (prov && provenance[i] != *prov) continue;
    out.push_back(i);
  }
  return out;
}

std::size_t EpochSet::count_where(std::optional<Label> label, std::optional<Provenance> prov) const {
  return indices_where(label, prov).size();
}

std::vector<int> EpochSet::label_ints() const {
  std::vector<int> out;
  out.reserve(labels.size());
  for (Label l : labels) out.push_back(static_cast<int>(l));
  return out;
}

EpochSet concat(const EpochSet& a, const EpochSet& b) {
  if (a.count() == 0 && a.layout.size() == 0) return b;
  if (a.layout.names != b.layout.names || a.samples() != b.samples()) {
    throw DataError("concat: epoch sets differ in layout or epoch length");
  }
  EpochSet out = a;
  out.epochs = concat_rows(a.epochs, b.epochs);
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.provenance.insert(out.provenance.end(), b.provenance.begin(), b.provenance.end());
  out.subjects.insert(out.subjects.end(), b.subjects.begin(), b.subjects.end());
  return out;
}

}  // namespace gepd
