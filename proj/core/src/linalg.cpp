#include "moflow/linalg.hpp"

#include <cmath>
#include <vector>

namespace moflow::linalg {

namespace {

void check_square(const Tensor& w) {
    if (w.rank() != 2 || w.extent(0) != w.extent(1)) {
        throw DimensionError("expected square matrix, got " + shape_str(w.shape()));
    }
}

// LU with partial pivoting; returns false when a pivot underflows.
bool lu_decompose(Tensor& a, std::vector<std::size_t>& perm, int& swaps) {
    const std::size_t n = a.extent(0);
    perm.resize(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    swaps = 0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        double best = std::fabs(a.at2(col, col));
        for (std::size_t r = col + 1; r < n; ++r) {
            double v = std::fabs(a.at2(r, col));
            if (v > best) {
                best = v;
                piv = r;
            }
        }
        if (best < 1e-12) return false;
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a.at2(piv, j), a.at2(col, j));
            std::swap(perm[piv], perm[col]);
            ++swaps;
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            double f = a.at2(r, col) / a.at2(col, col);
            a.at2(r, col) = f;
            for (std::size_t j = col + 1; j < n; ++j) a.at2(r, j) -= f * a.at2(col, j);
        }
    }
    return true;
}

}  // namespace

double log_abs_det(const Tensor& w) {
    check_square(w);
    Tensor a = w;
    std::vector<std::size_t> perm;
    int swaps = 0;
    if (!lu_decompose(a, perm, swaps)) {
        throw NumericalError("singular matrix in log_abs_det");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.extent(0); ++i) s += std::log(std::fabs(a.at2(i, i)));
    return s;
}

Tensor inverse(const Tensor& w) {
    check_square(w);
    const std::size_t n = w.extent(0);
    Tensor a = w;
    std::vector<std::size_t> perm;
    int swaps = 0;
    if (!lu_decompose(a, perm, swaps)) {
        throw NumericalError("singular matrix in inverse");
    }
    Tensor inv({n, n});
    std::vector<double> col(n), y(n);
    for (std::size_t c = 0; c < n; ++c) {
        // solve A x = e_c using PA = LU
        for (std::size_t i = 0; i < n; ++i) col[i] = (perm[i] == c) ? 1.0 : 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = col[i];
            for (std::size_t j = 0; j < i; ++j) y[i] -= a.at2(i, j) * y[j];
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double v = y[ii];
            for (std::size_t j = ii + 1; j < n; ++j) v -= a.at2(ii, j) * inv.at2(j, c);
            inv.at2(ii, c) = v / a.at2(ii, ii);
        }
    }
    return inv;
}

Tensor random_rotation(std::size_t n, Rng& rng) {
    Tensor q({n, n});
    for (std::size_t i = 0; i < n * n; ++i) q[i] = rng.normal();
    // Gram-Schmidt over columns
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t p = 0; p < c; ++p) {
            double dot = 0.0;
            for (std::size_t r = 0; r < n; ++r) dot += q.at2(r, c) * q.at2(r, p);
            for (std::size_t r = 0; r < n; ++r) q.at2(r, c) -= dot * q.at2(r, p);
        }
        double norm = 0.0;
        for (std::size_t r = 0; r < n; ++r) norm += q.at2(r, c) * q.at2(r, c);
        norm = std::sqrt(norm);
        if (norm < 1e-9) return random_rotation(n, rng);  // degenerate draw, retry
        for (std::size_t r = 0; r < n; ++r) q.at2(r, c) /= norm;
    }
    // force det +1 by flipping one column if needed
    Tensor a = q;
    std::vector<std::size_t> perm;
    int swaps = 0;
    if (lu_decompose(a, perm, swaps)) {
        double sign = (swaps % 2 == 0) ? 1.0 : -1.0;
        for (std::size_t i = 0; i < n; ++i) sign *= (a.at2(i, i) < 0 ? -1.0 : 1.0);
        if (sign < 0) {
            for (std::size_t r = 0; r < n; ++r) q.at2(r, 0) = -q.at2(r, 0);
        }
    }
    return q;
}

}  // namespace moflow::linalg
