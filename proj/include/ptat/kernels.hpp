#pragma once

#include <cstddef>
#include <vector>

#include "ptat/matrix.hpp"

// Dense numeric kernels behind the autodiff engine and the retrieval metrics.
//
// Two implementations share one signature set:
//   serial::   plain loops, kept as the reference the tests compare against;
//   parallel:: OpenMP row-parallel loops and an Eigen-backed GEMM.
// Every parallel kernel partitions work by output rows only, so each output
// element is produced by exactly one thread in a fixed summation order and
// results do not depend on scheduling.
namespace ptat::kernels {

// Layer-norm epsilon added to the row variance.
inline constexpr double kLayerNormEps = 1e-5;

namespace serial {

// c = op(a) * op(b) (+ c when accumulate). c must already have the result shape.
void gemm(const Matrix& a, bool transpose_a, const Matrix& b, bool transpose_b, Matrix& c,
          bool accumulate = false);
void softmax_rows(const Matrix& in, Matrix& out);
// rstd receives 1/sqrt(var + eps) per row.
void layer_norm_rows(const Matrix& in, Matrix& out, std::vector<double>& rstd);
// norms receives the Euclidean norm of every input row; rows are divided by it.
void l2_normalize_rows(const Matrix& in, Matrix& out, std::vector<double>& norms);
// Number of rows i whose diagonal entry ranks within the top k of row i.
// Ties rank the lower column index first.
std::size_t recall_hits(const Matrix& scores, std::size_t k);

}  // namespace serial

namespace parallel {

void gemm(const Matrix& a, bool transpose_a, const Matrix& b, bool transpose_b, Matrix& c,
          bool accumulate = false);
void softmax_rows(const Matrix& in, Matrix& out);
void layer_norm_rows(const Matrix& in, Matrix& out, std::vector<double>& rstd);
void l2_normalize_rows(const Matrix& in, Matrix& out, std::vector<double>& norms);
std::size_t recall_hits(const Matrix& scores, std::size_t k);

}  // namespace parallel

// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace ptat::kernels
