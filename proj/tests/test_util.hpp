#pragma once

#include <filesystem>
#include <string>

#include "grad_check.hpp"

namespace gepd::testing {

// Fresh scratch directory under the build tree's temp area.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("gepd_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace gepd::testing
