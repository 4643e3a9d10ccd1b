#pragma once

#include "moflow/rng.hpp"
#include "moflow/tensor.hpp"

namespace moflow::linalg {

// log|det W| for a square matrix via LU with partial pivoting.
// Throws NumericalError when the matrix is numerically singular.
double log_abs_det(const Tensor& w);

Tensor inverse(const Tensor& w);

// Orthogonal matrix with determinant +1, from QR of a Gaussian matrix.
Tensor random_rotation(std::size_t n, Rng& rng);

}  // namespace moflow::linalg
