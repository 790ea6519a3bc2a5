#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "cmssl/errors.hpp"

namespace cmssl::linalg {

// Eigenvalues of a symmetric d x d matrix (row-major) via cyclic Jacobi
// rotations. d stays tiny here (embedding dims), so no pivoting tricks.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t d) {
  if (a.size() != d * d) throw ContractError("symmetric_eigenvalues: bad matrix size");
  const int max_sweeps = 100;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j) off += a[i * d + j] * a[i * d + j];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) {
        double apq = a[p * d + q];
        if (std::abs(apq) < 1e-300) continue;
        double app = a[p * d + p], aqq = a[q * d + q];
        double theta = (aqq - app) / (2 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        double c = 1.0 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          double akp = a[k * d + p], akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          double apk = a[p * d + k], aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> eig(d);
  for (std::size_t i = 0; i < d; ++i) eig[i] = a[i * d + i];
  return eig;
}

// Singular values of an n x d row-major matrix, via the Gram matrix. Returned
// unsorted; callers only need sums and entropies.
inline std::vector<double> singular_values(const std::vector<double>& m, std::size_t n, std::size_t d) {
  if (m.size() != n * d) throw ContractError("singular_values: bad matrix size");
  std::vector<double> gram(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      double v = m[i * d + a];
      if (v == 0.0) continue;
      for (std::size_t b = 0; b < d; ++b) gram[a * d + b] += v * m[i * d + b];
    }
  std::vector<double> eig = symmetric_eigenvalues(std::move(gram), d);
  for (double& e : eig) e = std::sqrt(std::max(e, 0.0));
  return eig;
}

}  // namespace cmssl::linalg
