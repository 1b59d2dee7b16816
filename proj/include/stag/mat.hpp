#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "stag/error.hpp"

namespace stag {

// Dense row-major matrix of doubles. All numerics in the library run on this
// type; float32 appears only in on-disk tensor files.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), a(static_cast<size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw ValidationError("Mat: negative dimensions");
  }

  static Mat from_rows(std::initializer_list<std::initializer_list<double>> rws) {
    Mat m(static_cast<int>(rws.size()), rws.size() ? static_cast<int>(rws.begin()->size()) : 0);
    int i = 0;
    for (const auto& r : rws) {
      if (static_cast<int>(r.size()) != m.cols) throw ValidationError("Mat: ragged rows");
      int j = 0;
      for (double v : r) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  static Mat row_vector(const std::vector<double>& v) {
    Mat m(1, static_cast<int>(v.size()));
    m.a = v;
    return m;
  }

  static Mat scalar(double v) {
    Mat m(1, 1);
    m.a[0] = v;
    return m;
  }

  double* operator[](int r) { return a.data() + static_cast<size_t>(r) * cols; }
  const double* operator[](int r) const { return a.data() + static_cast<size_t>(r) * cols; }
  double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

  size_t size() const { return a.size(); }
  bool empty() const { return a.empty(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : a)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Mat row_copy(int r) const {
    Mat m(1, cols);
    for (int j = 0; j < cols; ++j) m(0, j) = (*this)(r, j);
    return m;
  }

  double row_norm(int r) const {
    double s = 0.0;
    const double* p = (*this)[r];
    for (int j = 0; j < cols; ++j) s += p[j] * p[j];
    return std::sqrt(s);
  }
};

inline std::string shape_str(const Mat& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

}  // namespace stag
