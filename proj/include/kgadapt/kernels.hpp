#pragma once
// Dense kernels used by the autodiff primitives and by retrieval.
//
// Every kernel has a serial reference in kernels::serial and an OpenMP
// version in kernels. Each output element is produced by the same inner loop
// in both, so the two agree bit-for-bit; tests rely on that.

#include <cstdint>
#include <span>
#include <vector>

#include "kgadapt/tensor.hpp"

namespace kgadapt::kernels {

// C = A * B^T   (A: m x k, B: n x k)
Matrix gemm_nt(const Matrix& a, const Matrix& b);
// C = A * B     (A: m x k, B: k x n)
Matrix gemm_nn(const Matrix& a, const Matrix& b);
// C = A^T * B   (A: k x m, B: k x n)
Matrix gemm_tn(const Matrix& a, const Matrix& b);

// Squared Euclidean distance from query to rows [first, last) of table.
std::vector<double> squared_distances(std::span<const double> query, const Matrix& table,
                                      std::size_t first, std::size_t last);
// Dot products of query with rows [first, last).
std::vector<double> dot_products(std::span<const double> query, const Matrix& table,
                                 std::size_t first, std::size_t last);

namespace serial {
Matrix gemm_nt(const Matrix& a, const Matrix& b);
Matrix gemm_nn(const Matrix& a, const Matrix& b);
Matrix gemm_tn(const Matrix& a, const Matrix& b);
std::vector<double> squared_distances(std::span<const double> query, const Matrix& table,
                                      std::size_t first, std::size_t last);
std::vector<double> dot_products(std::span<const double> query, const Matrix& table,
                                 std::size_t first, std::size_t last);
}  // namespace serial

// Multiply-add count accumulated by every kernel call since process start.
std::uint64_t flop_count();
void add_flops(std::uint64_t n);

// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();

}  // namespace kgadapt::kernels
