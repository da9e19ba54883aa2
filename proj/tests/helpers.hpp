#pragma once

#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dml/tensor.hpp"
#include "oracles.hpp"

namespace testing {

inline dml::Tensor tensor_from(const oracle::Vec& v, dml::Shape shape, bool grad = false) {
  return dml::Tensor(std::move(shape), std::vector<float>(v.begin(), v.end()), grad);
}

inline oracle::Vec to_vec(std::span<const float> s) { return oracle::Vec(s.begin(), s.end()); }

// Random values rounded to float so both sides see identical inputs.
inline oracle::Vec random_vec(std::mt19937_64& g, std::size_t n, double lo, double hi) {
  oracle::Vec v(n);
  for (auto& x : v) x = double(float(oracle::uniform(g, lo, hi)));
  return v;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dml_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
