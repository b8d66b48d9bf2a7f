#include <omp.h>

#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "kgadapt/kernels.hpp"

using namespace kgadapt;

namespace {

Matrix naive_nt(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
      c(i, j) = s;
    }
  }
  return c;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  }
  return t;
}

}  // namespace

TEST_CASE("parallel kernels equal the serial reference bit for bit") {
  const int threads = omp_get_max_threads();
  omp_set_num_threads(4);
  std::mt19937_64 rng(1);
  for (int k = 0; k < 12; ++k) {
    // Alternate below and above the parallel threshold.
    const std::size_t m = k % 2 ? 64 + rng() % 64 : 1 + rng() % 8;
    const std::size_t n = k % 2 ? 64 + rng() % 64 : 1 + rng() % 8;
    const std::size_t d = k % 2 ? 32 + rng() % 32 : 1 + rng() % 8;
    const Matrix a = fixtures::random_matrix(m, d, rng());
    const Matrix b = fixtures::random_matrix(n, d, rng());
    const Matrix bt = transpose(b);
    const Matrix at = transpose(a);
    CHECK(kernels::gemm_nt(a, b) == kernels::serial::gemm_nt(a, b));
    CHECK(kernels::gemm_nn(a, bt) == kernels::serial::gemm_nn(a, bt));
    CHECK(kernels::gemm_tn(at, bt) == kernels::serial::gemm_tn(at, bt));
    const Matrix q = fixtures::random_matrix(1, d, rng());
    CHECK(kernels::squared_distances(q.row(0), b, 0, n) ==
          kernels::serial::squared_distances(q.row(0), b, 0, n));
    CHECK(kernels::dot_products(q.row(0), b, 0, n) == kernels::serial::dot_products(q.row(0), b, 0, n));
  }
  omp_set_num_threads(threads);
}

TEST_CASE("gemm variants agree with a naive product") {
  const Matrix a = fixtures::random_matrix(5, 7, 2);
  const Matrix b = fixtures::random_matrix(4, 7, 3);
  const Matrix want = naive_nt(a, b);
  const Matrix nt = kernels::gemm_nt(a, b);
  const Matrix nn = kernels::gemm_nn(a, transpose(b));
  const Matrix tn = kernels::gemm_tn(transpose(a), transpose(b));
  for (std::size_t i = 0; i < want.size(); ++i) {
    CHECK(nt[i] == doctest::Approx(want[i]).epsilon(1e-12));
    CHECK(nn[i] == doctest::Approx(want[i]).epsilon(1e-12));
    CHECK(tn[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
  CHECK_THROWS(kernels::gemm_nt(a, fixtures::random_matrix(4, 6, 1)));
  CHECK_THROWS(kernels::gemm_nn(a, b));
}

TEST_CASE("distance kernels honour the row range and count work") {
  const Matrix t = Matrix::from_rows({{0, 0}, {3, 4}, {1, 1}});
  const std::vector<double> q = {0, 0};
  const auto before = kernels::flop_count();
  CHECK(kernels::squared_distances(q, t, 1, 3) == std::vector<double>{25, 2});
  CHECK(kernels::dot_products(std::vector<double>{1, 2}, t, 0, 2) == std::vector<double>{0, 11});
  CHECK(kernels::flop_count() > before);
  CHECK_THROWS(kernels::squared_distances(q, t, 2, 4));
  CHECK(kernels::max_threads() >= 1);
}
