#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "pcn/linalg.hpp"
#include "pcn/network.hpp"

namespace pcn {

struct DivergenceError : Error {
    DivergenceError(const std::string& what, std::size_t step)
        : Error(what + " at inference step " + std::to_string(step)), step_index(step) {}
    std::size_t step_index;
};

enum class InferenceSolver { gd, heun };

struct InferenceConfig {
    InferenceSolver solver = InferenceSolver::gd;
    double step_size = 0.1;               // beta (gd) or dt (heun)
    std::size_t max_steps = 100;
    double grad_tol = 1e-6;               // infinity norm over all activity gradients
    std::optional<int> halving_schedule;  // allowed step-size halvings on energy increase
    bool clamp_output = true;             // false: diagnostic mode, z_L free

    void validate() const {
        if (max_steps < 1) throw Error("InferenceConfig: max_steps must be >= 1");
        if (!(step_size > 0.0)) throw Error("InferenceConfig: step_size must be > 0");
        if (!(grad_tol >= 0.0)) throw Error("InferenceConfig: grad_tol must be >= 0");
    }
};

struct InferenceTrace {
    std::vector<double> energies;
    std::vector<double> grad_norms;
    std::size_t steps = 0;
    bool converged = false;
};

struct InferenceResult {
    Activities activities;
    /// Final output-layer state in diagnostic (unclamped) mode.
    std::optional<Matrix> free_output;
    InferenceTrace trace;
};

namespace detail {

constexpr double kEnergyDivergenceThreshold = 1e12;

// State for solvers: hidden activities plus, when the output is unclamped,
// the output layer as an extra free variable.
struct FreeState {
    std::vector<Matrix> z;  // layers 1..H, plus L when unclamped
    bool output_free = false;

    Activities hidden(const NetworkSpec& spec) const {
        Activities a;
        a.z.assign(z.begin(), z.begin() + spec.hidden());
        return a;
    }
};

inline double state_energy(const NetworkSpec& spec, const Weights& w, const FreeState& s,
                           const Batch& batch) {
    if (!s.output_free) return energy(spec, w, {s.z}, batch).total;
    Batch free_batch = batch;
    free_batch.y = s.z.back();
    Activities hidden;
    hidden.z.assign(s.z.begin(), s.z.end() - 1);
    return energy(spec, w, hidden, free_batch).total;
}

inline std::vector<Matrix> state_gradient(const NetworkSpec& spec, const Weights& w,
                                          const FreeState& s, const Batch& batch) {
    if (!s.output_free) return activity_gradient(spec, w, {s.z}, batch);
    // Unclamped output: treat z_L as a target for the hidden-layer gradients,
    // and append its own gradient eps_L.
    Batch free_batch = batch;
    free_batch.y = s.z.back();
    Activities hidden;
    hidden.z.assign(s.z.begin(), s.z.end() - 1);
    std::vector<Matrix> g = activity_gradient(spec, w, hidden, free_batch);
    const auto eps = residuals(spec, w, hidden, free_batch);
    g.push_back(eps.back());
    return g;
}

inline double grad_inf_norm(const std::vector<Matrix>& g) {
    double m = 0.0;
    for (const Matrix& gl : g) m = std::max(m, gl.max_abs());
    return m;
}

}  // namespace detail

/// Gradient-descent inference (z <- z - beta * dF/dz) with clamped input and
/// output. Stops after max_steps or when the gradient infinity norm falls
/// below grad_tol. With a halving schedule, an energy increase rolls the step
/// back and halves beta, up to the allowed count.
inline InferenceResult gd_inference(const NetworkSpec& spec, const Weights& weights,
                                    Activities init, const Batch& batch,
                                    const InferenceConfig& cfg) {
    cfg.validate();
    detail::require_model_shapes(spec, weights, init, batch);

    detail::FreeState state;
    state.z = std::move(init.z);
    state.output_free = !cfg.clamp_output;
    if (state.output_free) {
        const Matrix& prev = spec.hidden() > 0 ? state.z.back() : batch.x;
        state.z.push_back(detail::layer_map(spec, weights, spec.layers(), prev));
    }

    InferenceResult out;
    double beta = cfg.step_size;
    int halvings_left = cfg.halving_schedule.value_or(0);
    double prev_energy = detail::state_energy(spec, weights, state, batch);

    for (std::size_t t = 0; t < cfg.max_steps; ++t) {
        const auto g = detail::state_gradient(spec, weights, state, batch);
        const double gnorm = detail::grad_inf_norm(g);
        out.trace.energies.push_back(prev_energy);
        out.trace.grad_norms.push_back(gnorm);
        if (prev_energy > detail::kEnergyDivergenceThreshold)
            throw DivergenceError("gd_inference: energy diverged", t);
        if (gnorm < cfg.grad_tol) {
            out.trace.converged = true;
            break;
        }

        detail::FreeState candidate = state;
        for (std::size_t l = 0; l < candidate.z.size(); ++l) {
            Matrix step = g[l];
            step *= beta;
            candidate.z[l] -= step;
        }
        double cand_energy = detail::state_energy(spec, weights, candidate, batch);
        while (cfg.halving_schedule && cand_energy > prev_energy && halvings_left > 0) {
            --halvings_left;
            beta *= 0.5;
            candidate = state;
            for (std::size_t l = 0; l < candidate.z.size(); ++l) {
                Matrix step = g[l];
                step *= beta;
                candidate.z[l] -= step;
            }
            cand_energy = detail::state_energy(spec, weights, candidate, batch);
        }
        state = std::move(candidate);
        prev_energy = cand_energy;
        out.trace.steps = t + 1;
    }
    if (prev_energy > detail::kEnergyDivergenceThreshold)
        throw DivergenceError("gd_inference: energy diverged", out.trace.steps);

    if (state.output_free) {
        out.free_output = state.z.back();
        state.z.pop_back();
    }
    out.activities.z = std::move(state.z);
    return out;
}

/// Heun (explicit two-stage Runge-Kutta) integration of the inference
/// gradient flow with fixed dt: predictor Euler step, corrector averages the
/// slopes at both ends. Stopping rules match gd_inference.
inline InferenceResult heun_inference(const NetworkSpec& spec, const Weights& weights,
                                      Activities init, const Batch& batch,
                                      const InferenceConfig& cfg) {
    cfg.validate();
    detail::require_model_shapes(spec, weights, init, batch);

    detail::FreeState state;
    state.z = std::move(init.z);
    state.output_free = !cfg.clamp_output;
    if (state.output_free) {
        const Matrix& prev = spec.hidden() > 0 ? state.z.back() : batch.x;
        state.z.push_back(detail::layer_map(spec, weights, spec.layers(), prev));
    }

    InferenceResult out;
    const double dt = cfg.step_size;
    double current_energy = detail::state_energy(spec, weights, state, batch);

    for (std::size_t t = 0; t < cfg.max_steps; ++t) {
        const auto g0 = detail::state_gradient(spec, weights, state, batch);
        const double gnorm = detail::grad_inf_norm(g0);
        out.trace.energies.push_back(current_energy);
        out.trace.grad_norms.push_back(gnorm);
        if (current_energy > detail::kEnergyDivergenceThreshold)
            throw DivergenceError("heun_inference: energy diverged", t);
        if (gnorm < cfg.grad_tol) {
            out.trace.converged = true;
            break;
        }

        detail::FreeState predictor = state;
        for (std::size_t l = 0; l < predictor.z.size(); ++l) {
            Matrix step = g0[l];
            step *= dt;
            predictor.z[l] -= step;
        }
        const auto g1 = detail::state_gradient(spec, weights, predictor, batch);
        for (std::size_t l = 0; l < state.z.size(); ++l) {
            Matrix step = g0[l] + g1[l];
            step *= 0.5 * dt;
            state.z[l] -= step;
        }
        current_energy = detail::state_energy(spec, weights, state, batch);
        out.trace.steps = t + 1;
    }
    if (current_energy > detail::kEnergyDivergenceThreshold)
        throw DivergenceError("heun_inference: energy diverged", out.trace.steps);

    if (state.output_free) {
        out.free_output = state.z.back();
        state.z.pop_back();
    }
    out.activities.z = std::move(state.z);
    return out;
}

/// Assemble the activity Hessian H_z and per-sample right-hand sides b, then
/// solve H_z z* = b exactly. Linear networks only; the Hessian is positive
/// definite, so the shared Cholesky factor is reused across the batch.
inline Activities analytic_dln_inference(const NetworkSpec& spec, const Weights& weights,
                                         const Batch& batch) {
    spec.validate();
    weights.validate_shapes(spec);
    batch.validate_shapes(spec);
    if (!spec.is_linear())
        throw UnsupportedSpecError("analytic_dln_inference: linear activation required");
    if (batch.y_mask)
        throw UnsupportedSpecError("analytic_dln_inference: masked targets not supported");

    const std::size_t H = spec.hidden();
    Activities out;
    if (H == 0) return out;

    const std::size_t B = batch.size();
    std::vector<std::size_t> offsets(H + 1, 0);
    for (std::size_t l = 1; l <= H; ++l) offsets[l] = offsets[l - 1] + spec.widths[l];
    const std::size_t dim = offsets[H];

    // Effective transition matrices B_l = a_l W_l + tau_l I.
    std::vector<Matrix> b_mats;
    b_mats.reserve(spec.layers());
    for (std::size_t l = 1; l <= spec.layers(); ++l) {
        Matrix b = weights.w(l) * spec.a(l);
        if (spec.tau(l)) b += Matrix::identity(b.rows());
        b_mats.push_back(std::move(b));
    }

    Matrix hess(dim, dim);
    for (std::size_t l = 1; l <= H; ++l) {
        const Matrix& bnext = b_mats[l];  // B_{l+1}
        Matrix diag = matmul_tn(bnext, bnext);
        for (std::size_t i = 0; i < diag.rows(); ++i) diag(i, i) += 1.0 + spec.activity_decay;
        for (std::size_t i = 0; i < diag.rows(); ++i)
            for (std::size_t j = 0; j < diag.cols(); ++j)
                hess(offsets[l - 1] + i, offsets[l - 1] + j) = diag(i, j);
        if (l < H) {
            for (std::size_t i = 0; i < bnext.rows(); ++i)
                for (std::size_t j = 0; j < bnext.cols(); ++j) {
                    hess(offsets[l] + i, offsets[l - 1] + j) = -bnext(i, j);
                    hess(offsets[l - 1] + j, offsets[l] + i) = -bnext(i, j);
                }
        }
    }

    auto chol = CholeskyFactor::compute(hess);
    if (!chol)
        throw NumericalRankError("analytic_dln_inference: activity Hessian not PD", 0.0);

    const Matrix bx = matmul_nt(batch.x, b_mats[0]);                  // B x N_1
    const Matrix by = matmul(batch.y, b_mats[spec.layers() - 1]);     // B x N_{L-1}

    out.z.reserve(H);
    for (std::size_t l = 1; l <= H; ++l) out.z.emplace_back(B, spec.widths[l]);
    Vector rhs(dim);
    for (std::size_t i = 0; i < B; ++i) {
        std::fill(rhs.begin(), rhs.end(), 0.0);
        for (std::size_t j = 0; j < spec.widths[1]; ++j) rhs[j] += bx(i, j);
        for (std::size_t j = 0; j < spec.widths[H]; ++j) rhs[offsets[H - 1] + j] += by(i, j);
        const Vector sol = chol->solve(rhs);
        for (std::size_t l = 1; l <= H; ++l)
            for (std::size_t j = 0; j < spec.widths[l]; ++j)
                out.z[l - 1](i, j) = sol[offsets[l - 1] + j];
    }
    return out;
}

/// Forward-initialised inference with the configured solver.
inline InferenceResult run_inference(const NetworkSpec& spec, const Weights& weights,
                                     Activities init, const Batch& batch,
                                     const InferenceConfig& cfg) {
    switch (cfg.solver) {
        case InferenceSolver::gd: return gd_inference(spec, weights, std::move(init), batch, cfg);
        case InferenceSolver::heun:
            return heun_inference(spec, weights, std::move(init), batch, cfg);
    }
    throw Error("run_inference: unknown solver");
}

}  // namespace pcn
