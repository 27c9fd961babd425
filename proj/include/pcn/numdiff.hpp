#pragma once

#include <cmath>
#include <functional>

#include "pcn/matrix.hpp"

namespace pcn {

struct EvaluationError : Error {
    using Error::Error;
};

using ScalarFn = std::function<double(const Vector&)>;

namespace detail {

inline double checked_eval(const ScalarFn& f, const Vector& x) {
    const double v = f(x);
    if (!std::isfinite(v)) throw EvaluationError("numerical derivative: non-finite f evaluation");
    return v;
}

inline double coord_step(double step, double coordinate) {
    return step * std::max(1.0, std::abs(coordinate));
}

}  // namespace detail

/// Central-difference gradient with per-coordinate step scaling.
inline Vector numerical_gradient(const ScalarFn& f, const Vector& point, double step = 1e-4) {
    Vector g(point.size());
    Vector x = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double h = detail::coord_step(step, point[i]);
        x[i] = point[i] + h;
        const double fp = detail::checked_eval(f, x);
        x[i] = point[i] - h;
        const double fm = detail::checked_eval(f, x);
        x[i] = point[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Central second differences, symmetrised by averaging with the transpose.
/// Default step 1e-4 scaled by max(1, |coordinate|).
inline Matrix numerical_hessian(const ScalarFn& f, const Vector& point, double step = 1e-4) {
    if (!(step > 0.0)) throw Error("numerical_hessian: step must be positive");
    const std::size_t n = point.size();
    Matrix h(n, n);
    Vector x = point;
    const double f0 = detail::checked_eval(f, point);

    for (std::size_t i = 0; i < n; ++i) {
        const double hi = detail::coord_step(step, point[i]);
        x[i] = point[i] + hi;
        const double fp = detail::checked_eval(f, x);
        x[i] = point[i] - hi;
        const double fm = detail::checked_eval(f, x);
        x[i] = point[i];
        h(i, i) = (fp - 2.0 * f0 + fm) / (hi * hi);
    }

    for (std::size_t i = 0; i < n; ++i) {
        const double hi = detail::coord_step(step, point[i]);
        for (std::size_t j = i + 1; j < n; ++j) {
            const double hj = detail::coord_step(step, point[j]);
            x[i] = point[i] + hi;
            x[j] = point[j] + hj;
            const double fpp = detail::checked_eval(f, x);
            x[j] = point[j] - hj;
            const double fpm = detail::checked_eval(f, x);
            x[i] = point[i] - hi;
            x[j] = point[j] + hj;
            const double fmp = detail::checked_eval(f, x);
            x[j] = point[j] - hj;
            const double fmm = detail::checked_eval(f, x);
            x[i] = point[i];
            x[j] = point[j];
            const double v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            h(i, j) = h(j, i) = v;
        }
    }
    return h;
}

}  // namespace pcn
