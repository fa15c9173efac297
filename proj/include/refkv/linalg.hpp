#ifndef REFKV_LINALG_HPP
#define REFKV_LINALG_HPP

#include <cstdint>
#include <vector>

namespace refkv {

// Small dense double-precision helpers. Row-major storage throughout.

// Orthonormalizes the rows of a (rows × cols, rows <= cols) in place via
// modified Gram-Schmidt. Throws if the rows are numerically dependent.
void orthonormalize_rows(std::vector<double>& a, int64_t rows, int64_t cols);

// Symmetric eigendecomposition by cyclic Jacobi. a is n×n symmetric; on
// return eigvals holds the eigenvalues and eigvecs the column eigenvectors
// (eigvecs[i*n+j] is component i of eigenvector j).
void jacobi_eigen_symmetric(const std::vector<double>& a, int64_t n,
                            std::vector<double>& eigvals, std::vector<double>& eigvecs);

// Solves a·x = b (n×n) by Gaussian elimination with partial pivoting.
std::vector<double> solve_linear(std::vector<double> a, std::vector<double> b, int64_t n);

// c = a·b for n×n matrices.
std::vector<double> matmul_square(const std::vector<double>& a,
                                  const std::vector<double>& b, int64_t n);

}  // namespace refkv

#endif
