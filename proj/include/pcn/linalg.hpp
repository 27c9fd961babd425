#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pcn/matrix.hpp"

namespace pcn {

struct NumericalRankError : Error {
    NumericalRankError(const std::string& what, double cond)
        : Error(what + " (estimated condition number " + std::to_string(cond) + ")"),
          condition_estimate(cond) {}
    double condition_estimate;
};

namespace detail {

inline void require_square(const Matrix& m, const char* who) {
    if (m.rows() != m.cols()) throw ShapeError(std::string(who) + ": matrix not square");
    if (m.rows() == 0) throw ShapeError(std::string(who) + ": empty matrix");
}

inline void require_symmetric(const Matrix& m, const char* who, double rel_tol = 1e-10) {
    require_square(m, who);
    const double scale = std::max(1.0, m.max_abs());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = i + 1; j < m.cols(); ++j)
            if (std::abs(m(i, j) - m(j, i)) > rel_tol * scale)
                throw ShapeError(std::string(who) + ": matrix not symmetric");
}

}  // namespace detail

struct EigenDecomposition {
    Vector values;    // ascending
    Matrix vectors;   // column k pairs with values[k]
};

/// Symmetric eigensolver: Householder reduction to tridiagonal form followed
/// by implicit-shift QL iteration. Eigenvalues-only calls skip the transform
/// accumulation, leaving an O(n^2) iteration after the O(n^3) reduction.
inline EigenDecomposition sym_eig(const Matrix& input, bool want_vectors = true) {
    detail::require_symmetric(input, "sym_eig");
    const std::size_t n = input.rows();

    Matrix z = input;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double s = 0.5 * (z(i, j) + z(j, i));
            z(i, j) = z(j, i) = s;
        }

    Vector d(n, 0.0), e(n, 0.0);

    // Householder reduction (tred2). Rows above i hold the reflectors.
    for (std::size_t i = n - 1; i >= 1; --i) {
        const std::size_t l = i - 1;
        double h = 0.0;
        if (l > 0) {
            double scale = 0.0;
            for (std::size_t k = 0; k <= l; ++k) scale += std::abs(z(i, k));
            if (scale == 0.0) {
                e[i] = z(i, l);
            } else {
                for (std::size_t k = 0; k <= l; ++k) {
                    z(i, k) /= scale;
                    h += z(i, k) * z(i, k);
                }
                double f = z(i, l);
                double g = (f >= 0.0) ? -std::sqrt(h) : std::sqrt(h);
                e[i] = scale * g;
                h -= f * g;
                z(i, l) = f - g;
                f = 0.0;
                for (std::size_t j = 0; j <= l; ++j) {
                    if (want_vectors) z(j, i) = z(i, j) / h;
                    g = 0.0;
                    for (std::size_t k = 0; k <= j; ++k) g += z(j, k) * z(i, k);
                    for (std::size_t k = j + 1; k <= l; ++k) g += z(k, j) * z(i, k);
                    e[j] = g / h;
                    f += e[j] * z(i, j);
                }
                const double hh = f / (h + h);
                for (std::size_t j = 0; j <= l; ++j) {
                    f = z(i, j);
                    g = e[j] - hh * f;
                    e[j] = g;
                    double* zj = z.row(j);
                    const double* zi = z.row(i);
                    for (std::size_t k = 0; k <= j; ++k) zj[k] -= f * e[k] + g * zi[k];
                }
            }
        } else {
            e[i] = z(i, l);
        }
        d[i] = h;
        if (i == 1) break;
    }
    d[0] = 0.0;
    e[0] = 0.0;

    if (want_vectors) {
        // Accumulate the Householder transforms into z.
        for (std::size_t i = 0; i < n; ++i) {
            if (i > 0 && d[i] != 0.0) {
                const std::size_t l = i - 1;
                for (std::size_t j = 0; j <= l; ++j) {
                    double g = 0.0;
                    for (std::size_t k = 0; k <= l; ++k) g += z(i, k) * z(k, j);
                    for (std::size_t k = 0; k <= l; ++k) z(k, j) -= g * z(k, i);
                }
            }
            d[i] = z(i, i);
            z(i, i) = 1.0;
            if (i > 0)
                for (std::size_t j = 0; j < i; ++j) z(j, i) = z(i, j) = 0.0;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) d[i] = z(i, i);
    }

    // Implicit-shift QL on the tridiagonal (tql2).
    for (std::size_t i = 1; i < n; ++i) e[i - 1] = e[i];
    e[n - 1] = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
        int iter = 0;
        std::size_t m;
        do {
            for (m = l; m + 1 < n; ++m) {
                const double dd = std::abs(d[m]) + std::abs(d[m + 1]);
                if (std::abs(e[m]) <= std::numeric_limits<double>::epsilon() * dd) break;
            }
            if (m != l) {
                if (iter++ == 64) throw Error("sym_eig: QL iteration failed to converge");
                double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
                double r = std::hypot(g, 1.0);
                g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
                double s = 1.0, c = 1.0, p = 0.0;
                bool underflow = false;
                for (std::size_t ii = m; ii-- > l;) {
                    double f = s * e[ii];
                    const double b = c * e[ii];
                    r = std::hypot(f, g);
                    e[ii + 1] = r;
                    if (r == 0.0) {
                        d[ii + 1] -= p;
                        e[m] = 0.0;
                        underflow = true;
                        break;
                    }
                    s = f / r;
                    c = g / r;
                    g = d[ii + 1] - p;
                    r = (d[ii] - g) * s + 2.0 * c * b;
                    p = s * r;
                    d[ii + 1] = g + p;
                    g = c * r - b;
                    if (want_vectors) {
                        for (std::size_t k = 0; k < n; ++k) {
                            f = z(k, ii + 1);
                            z(k, ii + 1) = s * z(k, ii) + c * f;
                            z(k, ii) = c * z(k, ii) - s * f;
                        }
                    }
                }
                if (underflow) continue;
                d[l] -= p;
                e[l] = g;
                e[m] = 0.0;
            }
        } while (m != l);
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&d](std::size_t i, std::size_t j) { return d[i] < d[j]; });

    EigenDecomposition out;
    out.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) out.values[k] = d[order[k]];
    if (want_vectors) {
        out.vectors = Matrix(n, n);
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = z(i, order[k]);
    }
    return out;
}

/// Ascending eigenvalues of a symmetric matrix.
inline Vector sym_eigvals(const Matrix& m) { return sym_eig(m, false).values; }

/// Cholesky factor of an SPD matrix (lower triangular); nullopt when a pivot
/// fails, signalling the caller to fall back to LU.
class CholeskyFactor {
public:
    static std::optional<CholeskyFactor> compute(const Matrix& a) {
        const std::size_t n = a.rows();
        CholeskyFactor f;
        f.l_ = a;
        Matrix& l = f.l_;
        for (std::size_t j = 0; j < n; ++j) {
            double d = l(j, j);
            for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
            if (!(d > 0.0) || !std::isfinite(d)) return std::nullopt;
            const double ljj = std::sqrt(d);
            l(j, j) = ljj;
            for (std::size_t i = j + 1; i < n; ++i) {
                double s = l(i, j);
                const double* li = l.row(i);
                const double* lj = l.row(j);
                for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
                l(i, j) = s / ljj;
            }
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) l(i, j) = 0.0;
        return f;
    }

    Vector solve(const Vector& b) const {
        const std::size_t n = l_.rows();
        Vector y(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = b[i];
            const double* li = l_.row(i);
            for (std::size_t k = 0; k < i; ++k) s -= li[k] * y[k];
            y[i] = s / li[i];
        }
        Vector x(n);
        for (std::size_t ii = n; ii-- > 0;) {
            double s = y[ii];
            for (std::size_t k = ii + 1; k < n; ++k) s -= l_(k, ii) * x[k];
            x[ii] = s / l_(ii, ii);
        }
        return x;
    }

    /// Ratio of extreme squared diagonal pivots; cheap condition proxy.
    double condition_estimate() const {
        double lo = l_(0, 0), hi = l_(0, 0);
        for (std::size_t i = 0; i < l_.rows(); ++i) {
            lo = std::min(lo, l_(i, i));
            hi = std::max(hi, l_(i, i));
        }
        return (lo > 0.0) ? (hi / lo) * (hi / lo) : std::numeric_limits<double>::infinity();
    }

private:
    Matrix l_;
};

/// Partial-pivot LU factorisation.
class LuFactor {
public:
    static LuFactor compute(const Matrix& a) {
        LuFactor f;
        f.lu_ = a;
        const std::size_t n = a.rows();
        f.perm_.resize(n);
        for (std::size_t i = 0; i < n; ++i) f.perm_[i] = i;

        Matrix& lu = f.lu_;
        for (std::size_t k = 0; k < n; ++k) {
            std::size_t piv = k;
            double pmax = std::abs(lu(k, k));
            for (std::size_t i = k + 1; i < n; ++i) {
                const double v = std::abs(lu(i, k));
                if (v > pmax) {
                    pmax = v;
                    piv = i;
                }
            }
            if (piv != k) {
                for (std::size_t j = 0; j < n; ++j) std::swap(lu(k, j), lu(piv, j));
                std::swap(f.perm_[k], f.perm_[piv]);
            }
            const double pivot = lu(k, k);
            if (pivot == 0.0) continue;  // exactly singular; caught by condition check
            for (std::size_t i = k + 1; i < n; ++i) {
                const double m = lu(i, k) / pivot;
                lu(i, k) = m;
                if (m == 0.0) continue;
                double* ri = lu.row(i);
                const double* rk = lu.row(k);
                for (std::size_t j = k + 1; j < n; ++j) ri[j] -= m * rk[j];
            }
        }
        return f;
    }

    Vector solve(const Vector& b) const {
        const std::size_t n = lu_.rows();
        Vector y(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = b[perm_[i]];
            const double* li = lu_.row(i);
            for (std::size_t k = 0; k < i; ++k) s -= li[k] * y[k];
            y[i] = s;
        }
        Vector x(n);
        for (std::size_t ii = n; ii-- > 0;) {
            double s = y[ii];
            const double* li = lu_.row(ii);
            for (std::size_t k = ii + 1; k < n; ++k) s -= li[k] * x[k];
            const double d = li[ii];
            x[ii] = (d != 0.0) ? s / d : std::numeric_limits<double>::infinity();
        }
        return x;
    }

    double condition_estimate() const {
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
        for (std::size_t i = 0; i < lu_.rows(); ++i) {
            const double d = std::abs(lu_(i, i));
            lo = std::min(lo, d);
            hi = std::max(hi, d);
        }
        return (lo > 0.0) ? hi / lo : std::numeric_limits<double>::infinity();
    }

private:
    Matrix lu_;
    std::vector<std::size_t> perm_;
};

/// Solve m x = b. SPD inputs take the Cholesky fast path (which doubles as a
/// positive-definiteness check); anything else falls back to pivoted LU.
/// Throws NumericalRankError when the matrix looks numerically singular.
inline Vector solve_linear(const Matrix& m, const Vector& b) {
    detail::require_square(m, "solve_linear");
    if (m.rows() != b.size()) throw ShapeError("solve_linear: rhs length mismatch");

    bool symmetric = true;
    const double scale = std::max(1.0, m.max_abs());
    for (std::size_t i = 0; i < m.rows() && symmetric; ++i)
        for (std::size_t j = i + 1; j < m.cols(); ++j)
            if (std::abs(m(i, j) - m(j, i)) > 1e-10 * scale) {
                symmetric = false;
                break;
            }

    if (symmetric) {
        if (auto chol = CholeskyFactor::compute(m)) {
            const double cond = chol->condition_estimate();
            if (cond > 1e12)
                throw NumericalRankError("solve_linear: matrix numerically singular", cond);
            return chol->solve(b);
        }
    }
    LuFactor lu = LuFactor::compute(m);
    const double cond = lu.condition_estimate();
    if (!(cond < 1e12))
        throw NumericalRankError("solve_linear: matrix numerically singular", cond);
    return lu.solve(b);
}

/// Kronecker product with row-major vec convention:
/// (a (x) b)[(i,k),(j,l)] = a(i,j) * b(k,l).
inline Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows() * b.rows(), a.cols() * b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double aij = a(i, j);
            if (aij == 0.0) continue;
            for (std::size_t k = 0; k < b.rows(); ++k)
                for (std::size_t l = 0; l < b.cols(); ++l)
                    c(i * b.rows() + k, j * b.cols() + l) = aij * b(k, l);
        }
    return c;
}

}  // namespace pcn
