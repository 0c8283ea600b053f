#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gepd/nn/module.hpp"
#include "gepd/tensor.hpp"

namespace gepd::checkpoint {

// Binary container shared by every model checkpoint.
//
//   offset  size  field
//   0       8     magic "GEPDCKPT"
//   8       4     uint32 format version
//   12      4     uint32 reserved, 0
//   16      8     uint64 header length L
//   24      L     UTF-8 JSON header (kind, config, metadata)
//   24+L    8     uint64 tensor count
//   then per tensor: uint32 name length, name bytes, uint32 rank,
//   rank x uint64 dims, float64 values. All integers little-endian.
inline constexpr char kMagic[8] = {'G', 'E', 'P', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

struct Container {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
  void put(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }
};

void save(const std::filesystem::path& path, const Container& c);
// Throws std::runtime_error on a bad magic, unknown version or truncation.
Container load(const std::filesystem::path& path);

// Module state (parameters then buffers) as "<prefix>.<index>" tensors.
void store_module(Container& c, const std::string& prefix, nn::Module& module);
void restore_module(const Container& c, const std::string& prefix, nn::Module& module);
std::vector<Tensor> snapshot(nn::Module& module);
void restore(nn::Module& module, const std::vector<Tensor>& state);

Tensor vector_tensor(const std::vector<double>& v);
std::vector<double> tensor_vector(const Tensor& t);

}  // namespace gepd::checkpoint
