#include "gepd/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

namespace gepd::checkpoint {

namespace fs = std::filesystem;

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
T get(std::istream& in, const fs::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error(fmt::format("checkpoint '{}' is truncated", path.string()));
  return to_little(v);
}

std::string get_string(std::istream& in, std::size_t n, const fs::path& path) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error(fmt::format("checkpoint '{}' is truncated", path.string()));
  return s;
}

}  // namespace

const Tensor& Container::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw std::runtime_error(fmt::format("checkpoint has no tensor '{}'", name));
}

bool Container::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& p) { return p.first == name; });
}

void save(const fs::path& path, const Container& c) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write checkpoint '{}'", path.string()));
  const std::string header = c.header.dump();
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, 0);
  put<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint64_t>(out, c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.values()) put<double>(out, v);
  }
  if (!out) throw std::runtime_error(fmt::format("failed writing checkpoint '{}'", path.string()));
}

Container load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open checkpoint '{}'", path.string()));
  const std::string magic = get_string(in, sizeof(kMagic), path);
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(fmt::format("'{}' is not a checkpoint file", path.string()));
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw std::runtime_error(fmt::format("checkpoint '{}' has unsupported version {}", path.string(), version));
  }
  get<std::uint32_t>(in, path);
  Container c;
  const auto header_len = get<std::uint64_t>(in, path);
  c.header = nlohmann::json::parse(get_string(in, header_len, path));
  const auto count = get<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = get_string(in, get<std::uint32_t>(in, path), path);
    const auto rank = get<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in, path);
    Tensor t(shape);
    for (double& v : t.values()) v = get<double>(in, path);
    c.put(std::move(name), std::move(t));
  }
  return c;
}

void store_module(Container& c, const std::string& prefix, nn::Module& module) {
  const auto state = module.state();
  for (std::size_t i = 0; i < state.size(); ++i) c.put(fmt::format("{}.{}", prefix, i), *state[i]);
}

void restore_module(const Container& c, const std::string& prefix, nn::Module& module) {
  const auto state = module.state();
  for (std::size_t i = 0; i < state.size(); ++i) {
    const Tensor& t = c.tensor(fmt::format("{}.{}", prefix, i));
    if (t.shape() != state[i]->shape()) {
      throw std::runtime_error(fmt::format("checkpoint tensor {}.{} has shape {}, model expects {}", prefix, i,
                                           shape_string(t.shape()), shape_string(state[i]->shape())));
    }
    *state[i] = t;
  }
  if (c.has(fmt::format("{}.{}", prefix, state.size()))) {
    throw std::runtime_error(fmt::format("checkpoint holds more '{}' tensors than the model", prefix));
  }
}

std::vector<Tensor> snapshot(nn::Module& module) {
  std::vector<Tensor> out;
  for (Tensor* t : module.state()) out.push_back(*t);
  return out;
}

void restore(nn::Module& module, const std::vector<Tensor>& state) {
  const auto dst = module.state();
  if (dst.size() != state.size()) throw std::runtime_error("restore: state size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->shape() != state[i].shape()) throw std::runtime_error("restore: tensor shape mismatch");
    *dst[i] = state[i];
  }
}

Tensor vector_tensor(const std::vector<double>& v) { return Tensor({v.size()}, v); }

std::vector<double> tensor_vector(const Tensor& t) { return t.storage(); }

}  // namespace gepd::checkpoint
