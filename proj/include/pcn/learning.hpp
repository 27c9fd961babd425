#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pcn/inference.hpp"
#include "pcn/network.hpp"

namespace pcn {

enum class OptimKind { sgd, adam };
enum class TrainAlgorithm { pc, bp };

struct OptimState {
    OptimKind kind = OptimKind::sgd;
    double eta = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step_count = 0;
    std::vector<Matrix> m;  // adam first moments
    std::vector<Matrix> v;  // adam second moments
};

inline OptimState make_sgd(double eta) {
    OptimState s;
    s.kind = OptimKind::sgd;
    s.eta = eta;
    return s;
}

inline OptimState make_adam(double eta, double beta1 = 0.9, double beta2 = 0.999,
                            double eps = 1e-8) {
    OptimState s;
    s.kind = OptimKind::adam;
    s.eta = eta;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    return s;
}

namespace detail {

inline void require_finite_grads(const std::vector<Matrix>& grads) {
    for (std::size_t l = 0; l < grads.size(); ++l)
        if (!grads[l].all_finite())
            throw Error("optimiser: non-finite gradient for layer " + std::to_string(l + 1));
}

}  // namespace detail

/// W_l <- W_l - eta * g_l.
inline Weights sgd_step(Weights weights, const std::vector<Matrix>& grads, double eta) {
    if (grads.size() != weights.layers.size()) throw ShapeError("sgd_step: layer count mismatch");
    detail::require_finite_grads(grads);
    for (std::size_t l = 0; l < grads.size(); ++l) {
        Matrix step = grads[l];
        step *= eta;
        weights.layers[l] -= step;
    }
    return weights;
}

/// Standard bias-corrected Adam update.
inline std::pair<Weights, OptimState> adam_step(Weights weights, const std::vector<Matrix>& grads,
                                                OptimState state) {
    if (grads.size() != weights.layers.size()) throw ShapeError("adam_step: layer count mismatch");
    detail::require_finite_grads(grads);
    if (state.m.empty()) {
        for (const Matrix& w : weights.layers) {
            state.m.emplace_back(w.rows(), w.cols());
            state.v.emplace_back(w.rows(), w.cols());
        }
    }
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (std::size_t l = 0; l < grads.size(); ++l) {
        Matrix& m = state.m[l];
        Matrix& v = state.v[l];
        Matrix& w = weights.layers[l];
        const Matrix& g = grads[l];
        for (std::size_t k = 0; k < g.size(); ++k) {
            const double gk = g.data()[k];
            m.data()[k] = state.beta1 * m.data()[k] + (1.0 - state.beta1) * gk;
            v.data()[k] = state.beta2 * v.data()[k] + (1.0 - state.beta2) * gk * gk;
            const double mhat = m.data()[k] / bc1;
            const double vhat = v.data()[k] / bc2;
            w.data()[k] -= state.eta * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
    return {std::move(weights), std::move(state)};
}

inline std::pair<Weights, OptimState> optim_step(Weights weights, const std::vector<Matrix>& grads,
                                                 OptimState state) {
    if (state.kind == OptimKind::sgd)
        return {sgd_step(std::move(weights), grads, state.eta), std::move(state)};
    return adam_step(std::move(weights), grads, std::move(state));
}

struct TrainConfig {
    TrainAlgorithm algorithm = TrainAlgorithm::pc;
    std::size_t epochs = 1;
    std::size_t batch_size = 64;
    double eta = 1e-3;
    InferenceConfig inference;
    bool analytic_inference = false;  // linear nets: solve inference exactly
    std::size_t eval_period = 100;
    std::uint64_t seed = 0;
};

struct StepMetrics {
    double loss = 0.0;           // MSE on the batch at pre-update weights
    double pre_energy = 0.0;     // energy at forward-initialised activities
    double post_energy = 0.0;    // energy at the activities used for the update
    double grad_norm = 0.0;      // l2 norm over all weight gradients
    std::size_t inference_steps = 0;
};

struct TrainStepResult {
    Weights weights;
    OptimState optim;
    StepMetrics metrics;
};

namespace detail {

inline double grads_l2_norm(const std::vector<Matrix>& grads) {
    double s = 0.0;
    for (const Matrix& g : grads)
        for (std::size_t k = 0; k < g.size(); ++k) s += g.data()[k] * g.data()[k];
    return std::sqrt(s);
}

}  // namespace detail

/// One PC training step: forward-initialise activities, run the configured
/// inference, apply the weight gradient at the final activities through the
/// optimiser. Metrics are computed on the pre-update weights.
inline TrainStepResult pc_train_step(const NetworkSpec& spec, Weights weights, const Batch& batch,
                                     const TrainConfig& cfg, OptimState optim) {
    const ForwardResult fwd = forward(spec, weights, batch.x);
    TrainStepResult out{Weights{}, OptimState{}, {}};

    out.metrics.pre_energy = energy(spec, weights, fwd.activities, batch).total;
    {
        Matrix r = fwd.prediction - batch.y;
        double denom = static_cast<double>(batch.size());
        if (batch.y_mask) {
            denom = 0.0;
            for (std::size_t k = 0; k < r.size(); ++k) {
                r.data()[k] *= batch.y_mask->data()[k];
                denom += batch.y_mask->data()[k];
            }
        }
        double s = 0.0;
        for (std::size_t k = 0; k < r.size(); ++k) s += r.data()[k] * r.data()[k];
        out.metrics.loss = 0.5 * s / denom;
    }

    Activities equilibrated;
    if (cfg.analytic_inference) {
        equilibrated = analytic_dln_inference(spec, weights, batch);
    } else {
        InferenceResult res = run_inference(spec, weights, fwd.activities, batch, cfg.inference);
        equilibrated = std::move(res.activities);
        out.metrics.inference_steps = res.trace.steps;
    }
    out.metrics.post_energy = energy(spec, weights, equilibrated, batch).total;

    const auto grads = weight_gradient(spec, weights, equilibrated, batch);
    out.metrics.grad_norm = detail::grads_l2_norm(grads);
    auto [w, st] = optim_step(std::move(weights), grads, std::move(optim));
    out.weights = std::move(w);
    out.optim = std::move(st);
    return out;
}

/// One BP training step on the MSE loss.
inline TrainStepResult bp_train_step(const NetworkSpec& spec, Weights weights, const Batch& batch,
                                     const TrainConfig& cfg, OptimState optim) {
    (void)cfg;
    TrainStepResult out{Weights{}, OptimState{}, {}};
    const LossAndGradient lg = mse_loss_and_bp_gradient(spec, weights, batch);
    out.metrics.loss = lg.loss;
    out.metrics.pre_energy = lg.loss;  // energy at forward values equals the loss
    out.metrics.post_energy = lg.loss;
    out.metrics.grad_norm = detail::grads_l2_norm(lg.gradients);
    auto [w, st] = optim_step(std::move(weights), lg.gradients, std::move(optim));
    out.weights = std::move(w);
    out.optim = std::move(st);
    return out;
}

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;  // fraction of argmax(prediction) == argmax(target)
};

/// Loss plus classification accuracy over a full dataset (x rows, one-hot y).
inline EvalResult evaluate(const NetworkSpec& spec, const Weights& weights, const Matrix& xs,
                           const Matrix& ys, std::size_t chunk = 256) {
    if (xs.rows() == 0) throw Error("evaluate: empty dataset");
    EvalResult out;
    double sq = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < xs.rows(); start += chunk) {
        const std::size_t n = std::min(chunk, xs.rows() - start);
        Matrix xb(n, xs.cols()), yb(n, ys.cols());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < xs.cols(); ++j) xb(i, j) = xs(start + i, j);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < ys.cols(); ++j) yb(i, j) = ys(start + i, j);
        Matrix pred(n, ys.cols());
        try {
            pred = forward(spec, weights, xb).prediction;
        } catch (const OverflowError&) {
            out.loss = std::numeric_limits<double>::infinity();
            continue;  // unstable forward pass counts every sample as wrong
        }
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t pi = 0, yi = 0;
            for (std::size_t j = 1; j < ys.cols(); ++j) {
                if (pred(i, j) > pred(i, pi)) pi = j;
                if (yb(i, j) > yb(i, yi)) yi = j;
            }
            if (pi == yi) ++correct;
            for (std::size_t j = 0; j < ys.cols(); ++j) {
                const double r = pred(i, j) - yb(i, j);
                sq += r * r;
            }
        }
    }
    if (!std::isinf(out.loss)) out.loss = 0.5 * sq / static_cast<double>(xs.rows());
    out.accuracy = static_cast<double>(correct) / static_cast<double>(xs.rows());
    return out;
}

}  // namespace pcn
