// Serial reference vs OpenMP kernels. Prints one line per kernel and size.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>

#include "CLI11.hpp"
#include "kgadapt/kernels.hpp"

using namespace kgadapt;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (auto& v : m.values()) v = n(rng);
  return m;
}

double best_ms(const std::function<void()>& fn, int reps) {
  double best = 1e300;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

void row(const char* name, std::size_t n, const std::function<void()>& serial,
         const std::function<void()>& parallel, int reps) {
  const double s = best_ms(serial, reps);
  const double p = best_ms(parallel, reps);
  std::printf("%-18s %6zu %12.3f %12.3f %8.2fx\n", name, n, s, p, s / p);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Serial vs OpenMP kernel timings"};
  int threads = 0;
  int reps = 5;
  app.add_option("--threads", threads, "OpenMP threads (default: runtime default)");
  app.add_option("--reps", reps, "Repetitions; the best time is reported");
  CLI11_PARSE(app, argc, argv);
  if (threads > 0) omp_set_num_threads(threads);

  std::printf("threads %d\n", kernels::max_threads());
  std::printf("%-18s %6s %12s %12s %9s\n", "kernel", "n", "serial ms", "openmp ms", "speedup");
  for (std::size_t n : {64, 128, 256, 512}) {
    const Matrix a = random_matrix(n, n, 1);
    const Matrix b = random_matrix(n, n, 2);
    row("gemm_nt", n, [&] { kernels::serial::gemm_nt(a, b); }, [&] { kernels::gemm_nt(a, b); }, reps);
    row("gemm_nn", n, [&] { kernels::serial::gemm_nn(a, b); }, [&] { kernels::gemm_nn(a, b); }, reps);
    row("gemm_tn", n, [&] { kernels::serial::gemm_tn(a, b); }, [&] { kernels::gemm_tn(a, b); }, reps);
  }
  for (std::size_t v : {1000, 10000, 100000}) {
    const Matrix table = random_matrix(v, 64, 3);
    const Matrix q = random_matrix(1, 64, 4);
    row("squared_distances", v, [&] { kernels::serial::squared_distances(q.row(0), table, 0, v); },
        [&] { kernels::squared_distances(q.row(0), table, 0, v); }, reps);
    row("dot_products", v, [&] { kernels::serial::dot_products(q.row(0), table, 0, v); },
        [&] { kernels::dot_products(q.row(0), table, 0, v); }, reps);
  }
  return 0;
}
