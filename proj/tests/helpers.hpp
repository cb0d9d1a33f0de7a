#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "vitfl/matrix.hpp"
#include "vitfl/rng.hpp"

namespace test {

// Fresh scratch directory under $VITFL_TEST_TMP (or the system temp dir).
inline std::filesystem::path scratch(const std::string& name) {
  const char* root = std::getenv("VITFL_TEST_TMP");
  std::filesystem::path p =
      (root ? std::filesystem::path(root) : std::filesystem::temp_directory_path() / "vitfl_tests") /
      name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline vitfl::Matrix random_matrix(std::size_t r, std::size_t c, vitfl::Rng& rng) {
  vitfl::Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

}  // namespace test
