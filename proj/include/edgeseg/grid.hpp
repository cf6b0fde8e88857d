#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace edgeseg {

/// Raised for invalid inputs and runtime failures inside the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed user configuration (maps to CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major 2-D array.
template <typename T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] bool empty() const { return data.empty(); }

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  [[nodiscard]] bool same_shape(const Grid& o) const { return rows == o.rows && cols == o.cols; }
  template <typename U>
  [[nodiscard]] bool same_shape(const Grid<U>& o) const {
    return rows == o.rows && cols == o.cols;
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Grayscale intensities in [0,1].
using Image = Grid<double>;
/// Binary {0,1} map: masks, edge maps.
using BinaryMap = Grid<std::uint8_t>;

[[nodiscard]] inline bool is_binary(const BinaryMap& m) {
  for (auto v : m.data)
    if (v > 1) return false;
  return true;
}

[[nodiscard]] inline std::size_t count_ones(const BinaryMap& m) {
  std::size_t n = 0;
  for (auto v : m.data) n += (v != 0);
  return n;
}

inline std::string shape_str(int rows, int cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename A, typename B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw Error(std::string(what) + ": shape mismatch " + shape_str(a.rows, a.cols) + " vs " +
                shape_str(b.rows, b.cols));
}

// Spatial transforms used by consistency regularization, rotation pretraining and
// fine-tuning augmentation. Rotations are counter-clockwise by k*90 degrees.
template <typename T>
Grid<T> flip_horizontal(const Grid<T>& g) {
  Grid<T> out(g.rows, g.cols);
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c) out(r, c) = g(r, g.cols - 1 - c);
  return out;
}

template <typename T>
Grid<T> flip_vertical(const Grid<T>& g) {
  Grid<T> out(g.rows, g.cols);
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c) out(r, c) = g(g.rows - 1 - r, c);
  return out;
}

template <typename T>
Grid<T> rotate90(const Grid<T>& g, int k) {
  k = ((k % 4) + 4) % 4;
  Grid<T> cur = g;
  for (int i = 0; i < k; ++i) {
    Grid<T> next(cur.cols, cur.rows);
    // counter-clockwise: new(r, c) = old(c, W-1-r)
    for (int r = 0; r < next.rows; ++r)
      for (int c = 0; c < next.cols; ++c) next(r, c) = cur(c, cur.cols - 1 - r);
    cur = std::move(next);
  }
  return cur;
}

}  // namespace edgeseg
