#include "kgadapt/kernels.hpp"

#include <atomic>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kgadapt::kernels {
namespace {

std::atomic<std::uint64_t> g_flops{0};

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelThreshold = 1u << 16;

void check_inner(std::size_t lhs, std::size_t rhs, const char* what, const Matrix& a,
                 const Matrix& b) {
  if (lhs != rhs) {
    throw ShapeError(std::string(what) + ": " + a.shape_string() + " and " +
                     b.shape_string());
  }
}

void check_range(const Matrix& table, std::size_t first, std::size_t last,
                 std::size_t dim) {
  if (first > last || last > table.rows() || dim != table.cols()) {
    throw ShapeError("distance kernel: bad row range or query dimension");
  }
}

inline void nt_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  const std::size_t k = a.cols();
  const double* ar = a.data() + i * k;
  for (std::size_t j = 0; j < b.rows(); ++j) {
    const double* br = b.data() + j * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
    c(i, j) = s;
  }
}

inline void nn_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  double* cr = c.data() + i * n;
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a(i, p);
    const double* br = b.data() + p * n;
    for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
  }
}

// Row i of A^T B: sum over p of A(p, i) * B(p, :).
inline void tn_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  const std::size_t n = b.cols();
  double* cr = c.data() + i * n;
  for (std::size_t p = 0; p < a.rows(); ++p) {
    const double av = a(p, i);
    const double* br = b.data() + p * n;
    for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
  }
}

}  // namespace

std::uint64_t flop_count() { return g_flops.load(std::memory_order_relaxed); }
void add_flops(std::uint64_t n) { g_flops.fetch_add(n, std::memory_order_relaxed); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace serial {

Matrix gemm_nt(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.cols(), "gemm_nt", a, b);
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) nt_row(a, b, c, i);
  add_flops(a.rows() * b.rows() * a.cols());
  return c;
}

Matrix gemm_nn(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.rows(), "gemm_nn", a, b);
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) nn_row(a, b, c, i);
  add_flops(a.rows() * b.cols() * a.cols());
  return c;
}

Matrix gemm_tn(const Matrix& a, const Matrix& b) {
  check_inner(a.rows(), b.rows(), "gemm_tn", a, b);
  Matrix c(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i) tn_row(a, b, c, i);
  add_flops(a.cols() * b.cols() * a.rows());
  return c;
}

std::vector<double> squared_distances(std::span<const double> query, const Matrix& table,
                                      std::size_t first, std::size_t last) {
  check_range(table, first, last, query.size());
  std::vector<double> out(last - first);
  for (std::size_t r = first; r < last; ++r) {
    out[r - first] = squared_distance(query, table.row(r));
  }
  add_flops((last - first) * query.size());
  return out;
}

std::vector<double> dot_products(std::span<const double> query, const Matrix& table,
                                 std::size_t first, std::size_t last) {
  check_range(table, first, last, query.size());
  std::vector<double> out(last - first);
  for (std::size_t r = first; r < last; ++r) {
    const auto row = table.row(r);
    double s = 0.0;
    for (std::size_t j = 0; j < query.size(); ++j) s += query[j] * row[j];
    out[r - first] = s;
  }
  add_flops((last - first) * query.size());
  return out;
}

}  // namespace serial

Matrix gemm_nt(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.cols(), "gemm_nt", a, b);
  Matrix c(a.rows(), b.rows());
  const std::size_t work = a.rows() * b.rows() * a.cols();
  const auto m = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < m; ++i) nt_row(a, b, c, static_cast<std::size_t>(i));
  add_flops(work);
  return c;
}

Matrix gemm_nn(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.rows(), "gemm_nn", a, b);
  Matrix c(a.rows(), b.cols());
  const std::size_t work = a.rows() * b.cols() * a.cols();
  const auto m = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < m; ++i) nn_row(a, b, c, static_cast<std::size_t>(i));
  add_flops(work);
  return c;
}

Matrix gemm_tn(const Matrix& a, const Matrix& b) {
  check_inner(a.rows(), b.rows(), "gemm_tn", a, b);
  Matrix c(a.cols(), b.cols());
  const std::size_t work = a.cols() * b.cols() * a.rows();
  const auto m = static_cast<std::ptrdiff_t>(a.cols());
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < m; ++i) tn_row(a, b, c, static_cast<std::size_t>(i));
  add_flops(work);
  return c;
}

std::vector<double> squared_distances(std::span<const double> query, const Matrix& table,
                                      std::size_t first, std::size_t last) {
  check_range(table, first, last, query.size());
  std::vector<double> out(last - first);
  const std::size_t work = (last - first) * query.size();
  const auto lo = static_cast<std::ptrdiff_t>(first);
  const auto hi = static_cast<std::ptrdiff_t>(last);
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (std::ptrdiff_t r = lo; r < hi; ++r) {
    out[static_cast<std::size_t>(r - lo)] =
        squared_distance(query, table.row(static_cast<std::size_t>(r)));
  }
  add_flops(work);
  return out;
}

std::vector<double> dot_products(std::span<const double> query, const Matrix& table,
                                 std::size_t first, std::size_t last) {
  check_range(table, first, last, query.size());
  std::vector<double> out(last - first);
  const std::size_t work = (last - first) * query.size();
  const auto lo = static_cast<std::ptrdiff_t>(first);
  const auto hi = static_cast<std::ptrdiff_t>(last);
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (std::ptrdiff_t r = lo; r < hi; ++r) {
    const auto row = table.row(static_cast<std::size_t>(r));
    double s = 0.0;
    for (std::size_t j = 0; j < query.size(); ++j) s += query[j] * row[j];
    out[static_cast<std::size_t>(r - lo)] = s;
  }
  add_flops(work);
  return out;
}

}  // namespace kgadapt::kernels
