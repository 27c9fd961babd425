#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pcn/inference.hpp"
#include "pcn/linalg.hpp"
#include "pcn/network.hpp"
#include "pcn/numdiff.hpp"

namespace pcn {

struct NotCriticalError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Weight flattening (row-major per matrix, layers in order) shared by the
// closed forms and the finite-difference oracles.
// ---------------------------------------------------------------------------

inline std::size_t weight_count(const NetworkSpec& spec) {
    std::size_t p = 0;
    for (std::size_t l = 1; l <= spec.layers(); ++l) p += spec.widths[l] * spec.widths[l - 1];
    return p;
}

inline Vector flatten_weights(const Weights& w) {
    Vector v;
    for (const Matrix& m : w.layers) v.insert(v.end(), m.data(), m.data() + m.size());
    return v;
}

inline Weights unflatten_weights(const NetworkSpec& spec, const Vector& v) {
    Weights w;
    std::size_t off = 0;
    for (std::size_t l = 1; l <= spec.layers(); ++l) {
        Matrix m(spec.widths[l], spec.widths[l - 1]);
        for (std::size_t k = 0; k < m.size(); ++k) m.data()[k] = v[off + k];
        off += m.size();
        w.layers.push_back(std::move(m));
    }
    return w;
}

// ---------------------------------------------------------------------------
// Equilibrated energy and its rescaling
// ---------------------------------------------------------------------------

struct Rescaling {
    Matrix S;  // symmetric PD, N_L x N_L
};

namespace detail {

inline void require_linear_theory_spec(const NetworkSpec& spec, const char* who) {
    spec.validate();
    if (!spec.is_linear()) throw UnsupportedSpecError(std::string(who) + ": linear spec required");
    if (spec.has_skips()) {
        // Only the residual pattern (skips on l = 2..H) has a derived rescaling.
        for (std::size_t l = 1; l <= spec.layers(); ++l) {
            const bool want = (l >= 2 && l <= spec.hidden());
            if (spec.tau(l) != (want ? 1 : 0))
                throw UnsupportedSpecError(std::string(who) +
                                           ": skips must follow the residual pattern (l=2..H)");
        }
    }
}

}  // namespace detail

/// S(theta) = I + sum of noise-propagation Gram terms, premultipliers folded
/// into every product. Non-residual: S = I + sum_{l=2..L} (aW)_{L:l} (aW)_{L:l}^T.
/// Residual: the per-layer propagator picks up (I + a_l W_l) factors.
inline Rescaling rescaling_S(const NetworkSpec& spec, const Weights& weights) {
    detail::require_linear_theory_spec(spec, "rescaling_S");
    weights.validate_shapes(spec);

    const std::size_t L = spec.layers();
    Matrix s = Matrix::identity(spec.output_dim());
    if (L < 2) return {std::move(s)};

    Matrix p = weights.w(L) * spec.a(L);
    s += matmul_nt(p, p);
    for (std::size_t l = L - 1; l >= 2; --l) {
        Matrix f = weights.w(l) * spec.a(l);
        if (spec.tau(l)) f += Matrix::identity(f.rows());
        p = matmul(p, f);
        s += matmul_nt(p, p);
    }
    return {std::move(s)};
}

/// Closed-form energy at the exact inference equilibrium:
/// F* = (1/2B) sum_i r_i^T S^{-1} r_i with r_i = y_i - (network map) x_i.
inline double equilibrated_energy(const NetworkSpec& spec, const Weights& weights,
                                  const Batch& batch) {
    detail::require_linear_theory_spec(spec, "equilibrated_energy");
    weights.validate_shapes(spec);
    batch.validate_shapes(spec);
    if (batch.y_mask)
        throw UnsupportedSpecError("equilibrated_energy: masked targets not supported");

    const Matrix map = linear_network_map(spec, weights);
    const Matrix pred = matmul_nt(batch.x, map);
    const Rescaling resc = rescaling_S(spec, weights);
    auto chol = CholeskyFactor::compute(resc.S);
    if (!chol) throw NumericalRankError("equilibrated_energy: rescaling not PD", 0.0);

    const std::size_t B = batch.size();
    double total = 0.0;
    Vector r(spec.output_dim());
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < r.size(); ++j) r[j] = batch.y(i, j) - pred(i, j);
        const Vector sir = chol->solve(r);
        total += dot(r, sir);
    }
    return 0.5 * total / static_cast<double>(B);
}

/// F* as a function of the flattened weights, for finite-difference oracles.
inline ScalarFn equilibrated_energy_fn(const NetworkSpec& spec, const Batch& batch) {
    return [spec, batch](const Vector& theta) {
        return equilibrated_energy(spec, unflatten_weights(spec, theta), batch);
    };
}

/// MSE loss as a function of the flattened weights.
inline ScalarFn mse_loss_fn(const NetworkSpec& spec, const Batch& batch) {
    return [spec, batch](const Vector& theta) {
        return mse_loss_and_bp_gradient(spec, unflatten_weights(spec, theta), batch).loss;
    };
}

// ---------------------------------------------------------------------------
// Origin Hessians and saddle reports
// ---------------------------------------------------------------------------

enum class SaddleVerdict { strict, non_strict, not_critical };

inline const char* to_string(SaddleVerdict v) {
    switch (v) {
        case SaddleVerdict::strict: return "strict";
        case SaddleVerdict::non_strict: return "non-strict";
        case SaddleVerdict::not_critical: return "not-critical";
    }
    return "?";
}

struct SaddleReport {
    std::string location;
    double grad_norm = 0.0;
    double lambda_min = 0.0;
    double lambda_max = 0.0;
    SaddleVerdict verdict = SaddleVerdict::non_strict;
    bool degenerate_data = false;  // all-zero targets: strictness claim needs y != 0
};

constexpr double kStrictnessTol = 1e-8;   // |lambda| above this counts as nonzero
constexpr double kCriticalityTol = 1e-10;

namespace detail {

inline Matrix empirical_covariance(const Matrix& a, const Matrix& b) {
    Matrix c = matmul_tn(a, b);  // sum_i a_i b_i^T
    c *= 1.0 / static_cast<double>(a.rows());
    return c;
}

// Cross block d2/d(W_2)_{ab} d(W_1)_{cd} at the origin for H = 1:
// -a_1 a_2 * delta_{bc} * Sigma_yx[a, d]. Written into `h` at the given block
// offsets (rows: W_2 block, cols: W_1 block) and mirrored.
inline void fill_one_hidden_cross_blocks(Matrix& h, const NetworkSpec& spec,
                                         const Matrix& sigma_yx, std::size_t w1_off,
                                         std::size_t w2_off) {
    const std::size_t n0 = spec.widths[0], n1 = spec.widths[1], n2 = spec.widths[2];
    const double scale = spec.a(1) * spec.a(2);
    for (std::size_t a = 0; a < n2; ++a)
        for (std::size_t b = 0; b < n1; ++b)
            for (std::size_t d = 0; d < n0; ++d) {
                const double v = -scale * sigma_yx(a, d);
                const std::size_t row = w2_off + a * n1 + b;
                const std::size_t col = w1_off + b * n0 + d;
                h(row, col) = v;
                h(col, row) = v;
            }
}

}  // namespace detail

/// Hessian of the MSE loss at theta = 0: indefinite cross blocks for H = 1,
/// the null matrix for any deeper network.
inline Matrix loss_hessian_origin(const Batch& batch, const NetworkSpec& spec) {
    detail::require_linear_theory_spec(spec, "loss_hessian_origin");
    if (spec.has_skips())
        throw UnsupportedSpecError("loss_hessian_origin: non-residual networks only");
    batch.validate_shapes(spec);
    if (spec.hidden() < 1)
        throw UnsupportedSpecError("loss_hessian_origin: needs at least one hidden layer");

    Matrix h(weight_count(spec), weight_count(spec));
    if (spec.hidden() == 1) {
        const Matrix sigma_yx = detail::empirical_covariance(batch.y, batch.x);
        detail::fill_one_hidden_cross_blocks(h, spec, sigma_yx, 0,
                                             spec.widths[1] * spec.widths[0]);
    }
    return h;
}

struct OriginHessianResult {
    Matrix hessian;
    SaddleReport report;
};

/// Hessian of the equilibrated energy at theta = 0: the loss cross blocks
/// (H = 1 only) plus the always-present last diagonal block
/// -a_L^2 Sigma_yy (x) I_{N_{L-1}}.
inline OriginHessianResult energy_hessian_origin(const Batch& batch, const NetworkSpec& spec) {
    detail::require_linear_theory_spec(spec, "energy_hessian_origin");
    if (spec.has_skips())
        throw UnsupportedSpecError("energy_hessian_origin: non-residual networks only");
    batch.validate_shapes(spec);
    if (spec.hidden() < 1)
        throw UnsupportedSpecError("energy_hessian_origin: needs at least one hidden layer");

    const std::size_t p = weight_count(spec);
    const std::size_t L = spec.layers();
    Matrix h(p, p);

    if (spec.hidden() == 1) {
        const Matrix sigma_yx = detail::empirical_covariance(batch.y, batch.x);
        detail::fill_one_hidden_cross_blocks(h, spec, sigma_yx, 0,
                                             spec.widths[1] * spec.widths[0]);
    }

    const Matrix sigma_yy = detail::empirical_covariance(batch.y, batch.y);
    Matrix last = kron(sigma_yy, Matrix::identity(spec.widths[L - 1]));
    last *= -spec.a(L) * spec.a(L);
    const std::size_t last_off = p - last.rows();
    for (std::size_t i = 0; i < last.rows(); ++i)
        for (std::size_t j = 0; j < last.cols(); ++j) h(last_off + i, last_off + j) = last(i, j);

    OriginHessianResult out;
    const Vector eigs = sym_eigvals(h);
    out.report.location = "origin";
    out.report.lambda_min = eigs.front();
    out.report.lambda_max = eigs.back();
    out.report.grad_norm = 0.0;  // every gradient term carries a weight factor
    out.report.degenerate_data = (sigma_yy.max_abs() == 0.0);
    // Strictness here means an escape direction in the Hessian. For H > 1
    // the largest eigenvalue is exactly zero; positive curvature appears
    // only in higher derivatives.
    out.report.verdict = (out.report.lambda_min < -kStrictnessTol) ? SaddleVerdict::strict
                                                                   : SaddleVerdict::non_strict;
    out.hessian = std::move(h);
    return out;
}

// ---------------------------------------------------------------------------
// Zero-rank saddles (directional quadratic fit)
// ---------------------------------------------------------------------------

/// Least-squares quadratic coefficient q of F*(theta + delta * direction)
/// - F*(theta) ~= q delta^2, fitted over delta in {+-1e-2, +-1e-3}.
inline double directional_quadratic_coeff(const NetworkSpec& spec, const Weights& weights,
                                          const Batch& batch, const Weights& direction) {
    const double f0 = equilibrated_energy(spec, weights, batch);
    const double deltas[4] = {1e-2, -1e-2, 1e-3, -1e-3};
    double num = 0.0, den = 0.0;
    for (double d : deltas) {
        Weights moved = weights;
        for (std::size_t l = 0; l < moved.layers.size(); ++l) {
            Matrix step = direction.layers[l];
            step *= d;
            moved.layers[l] += step;
        }
        const double fd = equilibrated_energy(spec, moved, batch);
        num += d * d * (fd - f0);
        den += d * d * d * d;
    }
    return num / den;
}

/// Checks strictness of a zero-rank critical point (W_L = 0, W_{L-1:1} = 0)
/// of the equilibrated energy along the perturbation direction that sets the
/// last weight matrix to a (rectangular) identity.
inline SaddleReport zero_rank_saddle_check(const NetworkSpec& spec, const Weights& weights,
                                           const Batch& batch) {
    detail::require_linear_theory_spec(spec, "zero_rank_saddle_check");
    if (spec.has_skips())
        throw UnsupportedSpecError("zero_rank_saddle_check: non-residual networks only");
    weights.validate_shapes(spec);
    batch.validate_shapes(spec);

    SaddleReport report;
    report.location = "zero-rank";

    const ScalarFn f = equilibrated_energy_fn(spec, batch);
    const Vector theta = flatten_weights(weights);
    report.grad_norm = norm2(numerical_gradient(f, theta, 1e-4));

    const std::size_t L = spec.layers();
    const bool wl_zero = weights.w(L).max_abs() == 0.0;
    bool product_zero = true;
    if (L >= 2) {
        Matrix prod = weights.w(1);
        for (std::size_t l = 2; l <= L - 1; ++l) prod = matmul(weights.w(l), prod);
        product_zero = prod.max_abs() < 1e-14;
    }
    if (!wl_zero || !product_zero || report.grad_norm >= kCriticalityTol) {
        report.verdict = SaddleVerdict::not_critical;
        return report;
    }

    Weights direction;
    for (std::size_t l = 1; l <= L; ++l)
        direction.layers.emplace_back(spec.widths[l], spec.widths[l - 1]);
    Matrix& dl = direction.layers[L - 1];
    double dir_norm_sq = 0.0;
    for (std::size_t i = 0; i < std::min(dl.rows(), dl.cols()); ++i) {
        dl(i, i) = 1.0;
        dir_norm_sq += 1.0;
    }

    const double q = directional_quadratic_coeff(spec, weights, batch, direction);
    report.lambda_min = 2.0 * q / dir_norm_sq;  // Rayleigh bound along the direction
    report.lambda_max = 0.0;
    report.verdict =
        (q < -kStrictnessTol) ? SaddleVerdict::strict : SaddleVerdict::non_strict;
    return report;
}

// ---------------------------------------------------------------------------
// Activity Hessians
// ---------------------------------------------------------------------------

enum class HessianVariant { pc_fc, pc_resnet, ep };

inline const char* to_string(HessianVariant v) {
    switch (v) {
        case HessianVariant::pc_fc: return "pc_fc";
        case HessianVariant::pc_resnet: return "pc_resnet";
        case HessianVariant::ep: return "ep";
    }
    return "?";
}

namespace detail {

// Block tridiagonal assembly from transitions mapping block l to block l+1
// (plus, for the PC energies, a trailing transition into the clamped output).
// Diagonal blocks get shift * I and, when `include_gram`, the quadratic term
// B_{l+1}^T B_{l+1} of the prediction error they feed.
inline Matrix assemble_block_tridiag(const std::vector<Matrix>& transitions,
                                     const std::vector<std::size_t>& widths, double diag_shift,
                                     double last_diag_shift, bool include_gram) {
    const std::size_t n = widths.size();
    std::vector<std::size_t> off(n + 1, 0);
    for (std::size_t l = 0; l < n; ++l) off[l + 1] = off[l] + widths[l];
    Matrix h(off[n], off[n]);

    for (std::size_t l = 0; l < n; ++l) {
        const double shift = (l + 1 == n) ? last_diag_shift : diag_shift;
        for (std::size_t i = 0; i < widths[l]; ++i) h(off[l] + i, off[l] + i) = shift;
        if (include_gram && l < transitions.size()) {
            const Matrix& t = transitions[l];
            Matrix gram = matmul_tn(t, t);
            for (std::size_t i = 0; i < widths[l]; ++i)
                for (std::size_t j = 0; j < widths[l]; ++j) h(off[l] + i, off[l] + j) += gram(i, j);
        }
        if (l + 1 < n) {
            const Matrix& t = transitions[l];
            for (std::size_t i = 0; i < t.rows(); ++i)
                for (std::size_t j = 0; j < t.cols(); ++j) {
                    h(off[l + 1] + i, off[l] + j) = -t(i, j);
                    h(off[l] + j, off[l + 1] + i) = -t(i, j);
                }
        }
    }
    return h;
}

}  // namespace detail

/// Dense symmetric activity Hessian of the energy. pc_fc and pc_resnet cover
/// the clamped PC energy (fully connected and 1-skip residual); ep assembles
/// the equilibrium-propagation free/nudged Hessian over all L layers with
/// output-nudging strength beta.
inline Matrix assemble_activity_hessian(const NetworkSpec& spec, const Weights& weights,
                                        HessianVariant variant, double ep_beta = 1.0) {
    spec.validate();
    weights.validate_shapes(spec);
    if (!spec.is_linear())
        throw UnsupportedSpecError("assemble_activity_hessian: linear activation required");
    const std::size_t L = spec.layers();

    if (variant == HessianVariant::ep) {
        // Diagonals I (I + beta for the output block), off-diagonals -W_{l+1}.
        std::vector<Matrix> transitions;
        std::vector<std::size_t> widths;
        for (std::size_t l = 1; l <= L; ++l) widths.push_back(spec.widths[l]);
        for (std::size_t l = 2; l <= L; ++l) transitions.push_back(weights.w(l));
        return detail::assemble_block_tridiag(transitions, widths, 1.0, 1.0 + ep_beta, false);
    }

    if (spec.hidden() == 0)
        throw UnsupportedSpecError("assemble_activity_hessian: needs hidden layers");
    const bool want_skips = (variant == HessianVariant::pc_resnet);
    for (std::size_t l = 1; l <= L; ++l) {
        const bool want = want_skips && (l >= 2 && l <= spec.hidden());
        if (spec.tau(l) != (want ? 1 : 0))
            throw UnsupportedSpecError("assemble_activity_hessian: spec skips do not match "
                                       "the requested variant");
    }

    std::vector<Matrix> transitions;  // B_{l+1} for hidden block l = 1..H
    std::vector<std::size_t> widths;
    for (std::size_t l = 1; l <= spec.hidden(); ++l) widths.push_back(spec.widths[l]);
    for (std::size_t l = 2; l <= L; ++l) {
        Matrix b = weights.w(l) * spec.a(l);
        if (spec.tau(l)) b += Matrix::identity(b.rows());
        transitions.push_back(std::move(b));
    }
    const double shift = 1.0 + spec.activity_decay;
    return detail::assemble_block_tridiag(transitions, widths, shift, shift, true);
}

struct ConditionReport {
    double kappa = 0.0;
    double lambda_min = 0.0;
    double lambda_max = 0.0;
    bool positive_definite = false;
};

/// kappa = |lambda_max| / |lambda_min| from the extreme eigenvalues.
inline ConditionReport condition_number(const Matrix& h) {
    const Vector eigs = sym_eigvals(h);
    ConditionReport r;
    r.lambda_min = eigs.front();
    r.lambda_max = eigs.back();
    r.positive_definite = r.lambda_min > 0.0;
    const double lo = std::abs(r.lambda_min);
    r.kappa = (lo > 0.0) ? std::abs(r.lambda_max) / lo : std::numeric_limits<double>::infinity();
    return r;
}

/// Damped Newton direction -(H + (1/alpha) I)^{-1} g.
inline Vector trn_update(const Vector& grad, const Matrix& hess, double alpha) {
    if (!(alpha > 0.0)) throw Error("trn_update: alpha must be > 0");
    detail::require_square(hess, "trn_update");
    if (hess.rows() != grad.size()) throw ShapeError("trn_update: gradient length mismatch");
    Matrix damped = hess;
    const double lambda = 1.0 / alpha;
    for (std::size_t i = 0; i < damped.rows(); ++i) damped(i, i) += lambda;
    Vector x = solve_linear(damped, grad);
    for (double& v : x) v = -v;
    return x;
}

/// L(theta) / F*(theta) >= 1 for linear networks; nullopt at perfect fit.
inline std::optional<double> loss_energy_ratio(const NetworkSpec& spec, const Weights& weights,
                                               const Batch& batch) {
    const double fstar = equilibrated_energy(spec, weights, batch);
    const double loss = mse_loss_and_bp_gradient(spec, weights, batch).loss;
    if (fstar <= 1e-30) return std::nullopt;
    return loss / fstar;
}

/// Extreme eigenvalues of the block-diagonal part D of the pc_fc activity
/// Hessian, D_l = I + a_{l+1}^2 W_{l+1}^T W_{l+1}.
inline std::pair<double, double> spectrum_extremes_diag_block(const NetworkSpec& spec,
                                                              const Weights& weights) {
    spec.validate();
    weights.validate_shapes(spec);
    if (spec.hidden() == 0)
        throw UnsupportedSpecError("spectrum_extremes_diag_block: needs hidden layers");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 1; l <= spec.hidden(); ++l) {
        Matrix b = weights.w(l + 1) * spec.a(l + 1);
        Matrix block = matmul_tn(b, b);
        for (std::size_t i = 0; i < block.rows(); ++i) block(i, i) += 1.0;
        const Vector eigs = sym_eigvals(block);
        lo = std::min(lo, eigs.front());
        hi = std::max(hi, eigs.back());
    }
    return {lo, hi};
}

// ---------------------------------------------------------------------------
// Flat minima of scalar chains
// ---------------------------------------------------------------------------

struct ChainFlatnessResult {
    Matrix energy_hessian;  // numerical Hessian of F* at the minimum
    Matrix loss_hessian;    // numerical Hessian of L at the minimum
    double s = 1.0;         // 1 + sum_{l=2..L} (w_{L:l})^2, premultipliers folded
    double max_deviation = 0.0;  // max |H_F* - H_L / s|
    bool verified = false;       // deviation within 1e-5
};

/// At a perfect-fit point of a scalar linear chain, checks the flat-minima
/// identity H_F* = H_L / s entrywise by finite differences.
inline ChainFlatnessResult chain_minimum_flatness(const NetworkSpec& spec, const Weights& weights,
                                                  const Batch& batch) {
    detail::require_linear_theory_spec(spec, "chain_minimum_flatness");
    if (spec.has_skips())
        throw UnsupportedSpecError("chain_minimum_flatness: non-residual chains only");
    for (std::size_t w : spec.widths)
        if (w != 1) throw UnsupportedSpecError("chain_minimum_flatness: scalar chain required");
    weights.validate_shapes(spec);
    batch.validate_shapes(spec);

    const Matrix map = linear_network_map(spec, weights);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double r = batch.y(i, 0) - map(0, 0) * batch.x(i, 0);
        if (std::abs(r) > 1e-10)
            throw NotCriticalError("chain_minimum_flatness: not at a perfect-fit minimum");
    }

    ChainFlatnessResult out;
    const std::size_t L = spec.layers();
    double s = 1.0;
    double prod = 1.0;
    for (std::size_t l = L; l >= 2; --l) {
        prod *= spec.a(l) * weights.w(l)(0, 0);
        s += prod * prod;
    }
    out.s = s;

    const Vector theta = flatten_weights(weights);
    out.energy_hessian = numerical_hessian(equilibrated_energy_fn(spec, batch), theta);
    out.loss_hessian = numerical_hessian(mse_loss_fn(spec, batch), theta);

    for (std::size_t i = 0; i < out.energy_hessian.rows(); ++i)
        for (std::size_t j = 0; j < out.energy_hessian.cols(); ++j) {
            const double dev = std::abs(out.energy_hessian(i, j) - out.loss_hessian(i, j) / s);
            out.max_deviation = std::max(out.max_deviation, dev);
        }
    out.verified = out.max_deviation < 1e-5;
    return out;
}

}  // namespace pcn
