#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "ptat/errors.hpp"
#include "ptat/kernels.hpp"

namespace ptat::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMajor>;
using View = Eigen::Map<RowMajor>;

ConstView view(const Matrix& m) {
  return ConstView(m.data(), static_cast<Eigen::Index>(m.rows()),
                   static_cast<Eigen::Index>(m.cols()));
}

// Below this many multiply-adds the threading overhead outweighs the work.
constexpr std::size_t kParallelRowWork = 1 << 14;

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
  View out(c.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (!accumulate) out.setZero();
  if (k == 0) return;
  const auto av = view(a);
  const auto bv = view(b);
  if (!transpose_a && !transpose_b) {
    out.noalias() += av * bv;
  } else if (!transpose_a && transpose_b) {
    out.noalias() += av * bv.transpose();
  } else if (transpose_a && !transpose_b) {
    out.noalias() += av.transpose() * bv;
  } else {
    out.noalias() += av.transpose() * bv.transpose();
  }
}

void softmax_rows(const Matrix& in, Matrix& out) {
  const auto rows = static_cast<std::ptrdiff_t>(in.rows());
  const std::size_t cols = in.cols();
#pragma omp parallel for schedule(static) if (in.size() > kParallelRowWork)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      sum += y[c];
    }
    const double inv = 1.0 / sum;
    for (std::size_t c = 0; c < cols; ++c) y[c] *= inv;
  }
}

void layer_norm_rows(const Matrix& in, Matrix& out, std::vector<double>& rstd) {
  rstd.assign(in.rows(), 0.0);
  const auto rows = static_cast<std::ptrdiff_t>(in.rows());
  const std::size_t cols = in.cols();
  const double n = static_cast<double>(cols);
#pragma omp parallel for schedule(static) if (in.size() > kParallelRowWork)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += x[c];
    mean /= n;
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
    var /= n;
    const double s = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[static_cast<std::size_t>(r)] = s;
    for (std::size_t c = 0; c < cols; ++c) y[c] = (x[c] - mean) * s;
  }
}

void l2_normalize_rows(const Matrix& in, Matrix& out, std::vector<double>& norms) {
  norms.assign(in.rows(), 0.0);
  const auto rows = static_cast<std::ptrdiff_t>(in.rows());
  const std::size_t cols = in.cols();
#pragma omp parallel for schedule(static) if (in.size() > kParallelRowWork)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += x[c] * x[c];
    const double nrm = std::sqrt(ss);
    norms[static_cast<std::size_t>(r)] = nrm;
    for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] / nrm;
  }
}

std::size_t recall_hits(const Matrix& scores, std::size_t k) {
  const auto rows = static_cast<std::ptrdiff_t>(scores.rows());
  const std::size_t cols = scores.cols();
  std::size_t hits = 0;
#pragma omp parallel for schedule(static) reduction(+ : hits) if (scores.size() > kParallelRowWork)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const double* s = scores.data() + i * cols;
    const double target = s[i];
    std::size_t rank = 0;
    for (std::size_t j = 0; j < cols && rank < k; ++j) {
      if (s[j] > target || (s[j] == target && j < static_cast<std::size_t>(i))) ++rank;
    }
    if (rank < k) ++hits;
  }
  return hits;
}

}  // namespace parallel
}  // namespace ptat::kernels
