#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dml/tensor.hpp"

namespace dml {

using ClassId = std::uint8_t;

inline constexpr ClassId kIgnoreId = 255;
inline constexpr ClassId kAnomalyId = 254;

/// Row-major H x W plane of per-pixel values.
template <class T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), values(h * w, fill) {}

  std::size_t size() const { return values.size(); }
  T& at(std::size_t row, std::size_t col) { return values[row * width + col]; }
  const T& at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
  bool same_shape(const Grid& other) const { return height == other.height && width == other.width; }
  template <class U>
  bool same_shape(const Grid<U>& other) const { return height == other.height && width == other.width; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using SegMap = Grid<ClassId>;
using ProbMap = Grid<double>;
using ScoreMap = Grid<double>;

template <class A, class B>
void require_same_grid(const char* op, const Grid<A>& a, const Grid<B>& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(op, Shape{a.height, a.width}, Shape{b.height, b.width});
  }
}

}  // namespace dml
