#include <algorithm>
#include <cmath>

#include "ptat/errors.hpp"
#include "ptat/kernels.hpp"

namespace ptat::kernels::serial {

namespace {

double at(const Matrix& m, bool transposed, std::size_t r, std::size_t c) {
  return transposed ? m(c, r) : m(r, c);
}

}  // namespace

void gemm(const Matrix& a, bool transpose_a, const Matrix& b, bool transpose_b, Matrix& c,
          bool accumulate) {
  const std::size_t m = transpose_a ? a.cols() : a.rows();
  const std::size_t k = transpose_a ? a.rows() : a.cols();
  const std::size_t kb = transpose_b ? b.cols() : b.rows();
  const std::size_t n = transpose_b ? b.rows() : b.cols();
  if (k != kb || c.rows() != m || c.cols() != n) {
    throw ShapeError("gemm: " + a.shape() + (transpose_a ? "^T" : "") + " * " + b.shape() +
                     (transpose_b ? "^T" : "") + " -> " + c.shape());
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += at(a, transpose_a, i, p) * at(b, transpose_b, p, j);
      c(i, j) = accumulate ? c(i, j) + acc : acc;
    }
  }
}

void softmax_rows(const Matrix& in, Matrix& out) {
  for (std::size_t r = 0; r < in.rows(); ++r) {
    auto x = in.row(r);
    auto y = out.row(r);
    const double mx = *std::max_element(x.begin(), x.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) {
      y[c] = std::exp(x[c] - mx);
      sum += y[c];
    }
    for (double& v : y) v /= sum;
  }
}

void layer_norm_rows(const Matrix& in, Matrix& out, std::vector<double>& rstd) {
  rstd.assign(in.rows(), 0.0);
  const double n = static_cast<double>(in.cols());
  for (std::size_t r = 0; r < in.rows(); ++r) {
    auto x = in.row(r);
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    auto y = out.row(r);
    for (std::size_t c = 0; c < x.size(); ++c) y[c] = (x[c] - mean) * rstd[r];
  }
}

void l2_normalize_rows(const Matrix& in, Matrix& out, std::vector<double>& norms) {
  norms.assign(in.rows(), 0.0);
  for (std::size_t r = 0; r < in.rows(); ++r) {
    auto x = in.row(r);
    double ss = 0.0;
    for (double v : x) ss += v * v;
    norms[r] = std::sqrt(ss);
    auto y = out.row(r);
    for (std::size_t c = 0; c < x.size(); ++c) y[c] = x[c] / norms[r];
  }
}

std::size_t recall_hits(const Matrix& scores, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const double target = scores(i, i);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      if (scores(i, j) > target || (scores(i, j) == target && j < i)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return hits;
}

}  // namespace ptat::kernels::serial
