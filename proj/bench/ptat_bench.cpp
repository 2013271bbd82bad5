// Serial reference vs OpenMP kernels on the shapes a training batch produces.
#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ptat/kernels.hpp"
#include "ptat/matrix.hpp"

namespace {

using ptat::Matrix;
namespace serial = ptat::kernels::serial;
namespace parallel = ptat::kernels::parallel;

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

// Median wall time in microseconds.
double time_us(const std::function<void()>& fn, int reps) {
  fn();  // warm caches and the thread pool
  std::vector<double> t;
  for (int r = 0; r < reps; ++r) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - start)
                    .count());
  }
  std::nth_element(t.begin(), t.begin() + t.size() / 2, t.end());
  return t[t.size() / 2];
}

struct Row {
  std::string kernel, shape;
  double serial_us, parallel_us, diff;
};

void print(const Row& r) {
  std::printf("%-16s %-22s %12.1f %12.1f %8.2fx %10.1e\n", r.kernel.c_str(), r.shape.c_str(),
              r.serial_us, r.parallel_us, r.serial_us / r.parallel_us, r.diff);
}

std::string dims(std::size_t a, std::size_t b) { return std::to_string(a) + "x" + std::to_string(b); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serial vs parallel kernel timings"};
  int reps = 20;
  std::uint64_t seed = 1;
  app.add_option("--reps", reps, "timed repetitions per kernel")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "input seed");
  CLI11_PARSE(app, argc, argv);

  std::mt19937_64 rng(seed);
  std::printf("threads: %d\n", ptat::kernels::max_threads());
  std::printf("%-16s %-22s %12s %12s %9s %10s\n", "kernel", "shape", "serial_us", "parallel_us",
              "speedup", "max_diff");

  // (batch * tokens) x d activations times d x hidden weights, plus the
  // batch x batch similarity matrix of the retrieval metrics.
  const std::vector<std::array<std::size_t, 3>> gemms{
      {32 * 33, 32, 512}, {32 * 33, 512, 32}, {32 * 33, 32, 32}, {200, 32, 200}, {1000, 32, 1000}};
  for (const auto& [m, k, n] : gemms) {
    const Matrix a = random_matrix(m, k, rng), b = random_matrix(k, n, rng);
    Matrix cs(m, n), cp(m, n);
    Row r{"gemm", dims(m, k) + "*" + dims(k, n), 0, 0, 0};
    r.serial_us = time_us([&] { serial::gemm(a, false, b, false, cs); }, reps);
    r.parallel_us = time_us([&] { parallel::gemm(a, false, b, false, cp); }, reps);
    r.diff = ptat::max_abs_diff(cs, cp);
    print(r);
  }
  {
    // Weight gradient: a^T * g.
    const Matrix a = random_matrix(32 * 33, 32, rng), g = random_matrix(32 * 33, 512, rng);
    Matrix cs(32, 512), cp(32, 512);
    Row r{"gemm_tn", dims(32 * 33, 32) + "'*" + dims(32 * 33, 512), 0, 0, 0};
    r.serial_us = time_us([&] { serial::gemm(a, true, g, false, cs); }, reps);
    r.parallel_us = time_us([&] { parallel::gemm(a, true, g, false, cp); }, reps);
    r.diff = ptat::max_abs_diff(cs, cp);
    print(r);
  }

  for (const auto& [rows, cols] : std::vector<std::pair<std::size_t, std::size_t>>{
           {32 * 2 * 33, 33}, {1000, 1000}}) {
    const Matrix in = random_matrix(rows, cols, rng);
    Matrix os(rows, cols), op(rows, cols);
    Row r{"softmax_rows", dims(rows, cols), 0, 0, 0};
    r.serial_us = time_us([&] { serial::softmax_rows(in, os); }, reps);
    r.parallel_us = time_us([&] { parallel::softmax_rows(in, op); }, reps);
    r.diff = ptat::max_abs_diff(os, op);
    print(r);
  }
  {
    const Matrix in = random_matrix(32 * 33, 32, rng);
    Matrix os(in.rows(), in.cols()), op(in.rows(), in.cols());
    std::vector<double> rs, rp;
    Row r{"layer_norm_rows", dims(in.rows(), in.cols()), 0, 0, 0};
    r.serial_us = time_us([&] { serial::layer_norm_rows(in, os, rs); }, reps);
    r.parallel_us = time_us([&] { parallel::layer_norm_rows(in, op, rp); }, reps);
    r.diff = ptat::max_abs_diff(os, op);
    print(r);
  }
  {
    const Matrix in = random_matrix(1000, 32, rng);
    Matrix os(in.rows(), in.cols()), op(in.rows(), in.cols());
    std::vector<double> ns, np;
    Row r{"l2_normalize", dims(in.rows(), in.cols()), 0, 0, 0};
    r.serial_us = time_us([&] { serial::l2_normalize_rows(in, os, ns); }, reps);
    r.parallel_us = time_us([&] { parallel::l2_normalize_rows(in, op, np); }, reps);
    r.diff = ptat::max_abs_diff(os, op);
    print(r);
  }
  {
    const Matrix scores = random_matrix(1000, 1000, rng);
    std::size_t hs = 0, hp = 0;
    Row r{"recall_hits@10", dims(1000, 1000), 0, 0, 0};
    r.serial_us = time_us([&] { hs = serial::recall_hits(scores, 10); }, reps);
    r.parallel_us = time_us([&] { hp = parallel::recall_hits(scores, 10); }, reps);
    r.diff = hs == hp ? 0.0 : 1.0;
    print(r);
  }
  return 0;
}
