#include <chrono>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stag/kernels.hpp"
#include "stag/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

using stag::Mat;

double time_best_of(int repeats, const std::function<void()>& fn) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

bool bytes_equal(const Mat& a, const Mat& b) {
  return a.rows == b.rows && a.cols == b.cols &&
         std::memcmp(a.a.data(), b.a.data(), a.a.size() * sizeof(double)) == 0;
}

void report(const std::string& name, double parallel_s, double serial_s, bool identical) {
  std::cout << std::left << std::setw(18) << name << std::right << std::fixed << std::setprecision(3)
            << std::setw(10) << parallel_s * 1e3 << " ms" << std::setw(10) << serial_s * 1e3 << " ms"
            << std::setw(8) << std::setprecision(2) << serial_s / parallel_s << "x"
            << (identical ? "" : "   OUTPUT MISMATCH") << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compare parallel kernels against the serial reference"};
  int n = 2048, d = 256, k = 1024, repeats = 5;
  app.add_option("--n", n, "rows");
  app.add_option("--d", d, "feature dim");
  app.add_option("--k", k, "codebook size");
  app.add_option("--repeats", repeats, "timing repeats (best-of)");
  CLI11_PARSE(app, argc, argv);

#ifdef _OPENMP
  std::cout << "openmp threads: " << omp_get_max_threads() << "\n";
#else
  std::cout << "openmp: disabled\n";
#endif
  std::cout << "n=" << n << " d=" << d << " k=" << k << " (best of " << repeats << ")\n\n";
  std::cout << std::left << std::setw(18) << "kernel" << std::right << std::setw(13) << "parallel"
            << std::setw(13) << "serial" << std::setw(9) << "speedup" << "\n";

  stag::Rng rng(7);
  Mat A(n, d), B(d, k), E(k, d);
  for (double& v : A.a) v = rng.normal(0.0, 1.0);
  for (double& v : B.a) v = rng.normal(0.0, 1.0);
  for (double& v : E.a) v = rng.normal(0.0, 1.0);

  Mat P, S;
  double tp = time_best_of(repeats, [&] { stag::kernels::matmul(A, false, B, false, P); });
  double ts = time_best_of(repeats, [&] { stag::kernels::serial::matmul(A, false, B, false, S); });
  report("matmul", tp, ts, bytes_equal(P, S));

  tp = time_best_of(repeats, [&] { stag::kernels::l2_normalize_rows(A, P); });
  ts = time_best_of(repeats, [&] { stag::kernels::serial::l2_normalize_rows(A, S); });
  report("l2_normalize_rows", tp, ts, bytes_equal(P, S));

  Mat L(n, k);
  for (double& v : L.a) v = rng.normal(0.0, 1.0);
  tp = time_best_of(repeats, [&] { stag::kernels::softmax_rows(L, P); });
  ts = time_best_of(repeats, [&] { stag::kernels::serial::softmax_rows(L, S); });
  report("softmax_rows", tp, ts, bytes_equal(P, S));

  tp = time_best_of(repeats, [&] { stag::kernels::cosine_matrix(A, E, P); });
  ts = time_best_of(repeats, [&] { stag::kernels::serial::cosine_matrix(A, E, S); });
  report("cosine_matrix", tp, ts, bytes_equal(P, S));

  tp = time_best_of(repeats, [&] { stag::kernels::soft_assign_batch(A, E, 0.1, P); });
  ts = time_best_of(repeats, [&] { stag::kernels::serial::soft_assign_batch(A, E, 0.1, S); });
  report("soft_assign_batch", tp, ts, bytes_equal(P, S));

  Mat attn = P;
  tp = time_best_of(repeats, [&] { stag::kernels::quantize_rows(attn, E, P); });
  ts = time_best_of(repeats, [&] { stag::kernels::serial::quantize_rows(attn, E, S); });
  report("quantize_rows", tp, ts, bytes_equal(P, S));

  return 0;
}
