#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "perturbkit/common.hpp"

namespace perturbkit {

/// Dense row-major matrix of doubles. The library's models are tiny, so
/// clarity beats BLAS here.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return d[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return d[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return d.size(); }

  void fill(double v) { std::fill(d.begin(), d.end(), v); }
  void zero() { fill(0.0); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  static Mat gaussian(int r, int c, double stddev, std::mt19937_64& rng) {
    Mat m(r, c);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : m.d) v = dist(rng);
    return m;
  }
};

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int k = 0; k < a.cols; ++k) {
      double av = a.at(i, k);
      if (av == 0.0) continue;
      for (int j = 0; j < b.cols; ++j) out.at(i, j) += av * b.at(k, j);
    }
  return out;
}

/// a * b^T
inline Mat matmul_nt(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (int k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(j, k);
      out.at(i, j) = s;
    }
  return out;
}

/// a^T * b
inline Mat matmul_tn(const Mat& a, const Mat& b) {
  Mat out(a.cols, b.cols);
  for (int k = 0; k < a.rows; ++k)
    for (int i = 0; i < a.cols; ++i) {
      double av = a.at(k, i);
      if (av == 0.0) continue;
      for (int j = 0; j < b.cols; ++j) out.at(i, j) += av * b.at(k, j);
    }
  return out;
}

/// Row-wise log-softmax, numerically stable.
inline Mat log_softmax_rows(const Mat& logits) {
  Mat out(logits.rows, logits.cols);
  for (int i = 0; i < logits.rows; ++i) {
    double mx = logits.at(i, 0);
    for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, logits.at(i, j));
    double lse = 0.0;
    for (int j = 0; j < logits.cols; ++j) lse += std::exp(logits.at(i, j) - mx);
    lse = mx + std::log(lse);
    for (int j = 0; j < logits.cols; ++j) out.at(i, j) = logits.at(i, j) - lse;
  }
  return out;
}

inline bool all_finite(const Mat& m) {
  for (double v : m.d)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace perturbkit
