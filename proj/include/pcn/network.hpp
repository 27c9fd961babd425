#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pcn/linalg.hpp"
#include "pcn/matrix.hpp"
#include "pcn/rng.hpp"

namespace pcn {

struct UnsupportedSpecError : Error {
    using Error::Error;
};

struct OverflowError : Error {
    OverflowError(const std::string& what, std::size_t layer)
        : Error(what + " at layer " + std::to_string(layer)), layer_index(layer) {}
    std::size_t layer_index;
};

enum class Activation { linear, tanh, relu };
enum class Parameterisation { sp, mupc, orthogonal };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::linear: return "linear";
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
    }
    return "?";
}

inline const char* to_string(Parameterisation p) {
    switch (p) {
        case Parameterisation::sp: return "sp";
        case Parameterisation::mupc: return "mupc";
        case Parameterisation::orthogonal: return "orthogonal";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "linear") return Activation::linear;
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    throw Error("unknown activation '" + s + "' (expected linear|tanh|relu)");
}

inline Parameterisation parameterisation_from_string(const std::string& s) {
    if (s == "sp") return Parameterisation::sp;
    if (s == "mupc") return Parameterisation::mupc;
    if (s == "orthogonal") return Parameterisation::orthogonal;
    throw Error("unknown parameterisation '" + s + "' (expected sp|mupc|orthogonal)");
}

/// Architecture plus parameterisation: widths N_0..N_L, the activation used
/// on hidden-to-next transitions, per-layer skip flags and premultipliers,
/// and an optional quadratic activity decay.
struct NetworkSpec {
    std::vector<std::size_t> widths;       // N_0..N_L
    Activation activation = Activation::linear;
    std::vector<int> skips;                // tau_l for l = 1..L
    std::vector<double> premultipliers;    // a_l for l = 1..L
    Parameterisation parameterisation = Parameterisation::sp;
    double activity_decay = 0.0;

    std::size_t layers() const { return widths.empty() ? 0 : widths.size() - 1; }   // L
    std::size_t hidden() const { return layers() == 0 ? 0 : layers() - 1; }         // H
    std::size_t input_dim() const { return widths.front(); }
    std::size_t output_dim() const { return widths.back(); }

    double a(std::size_t l) const { return premultipliers[l - 1]; }  // l in 1..L
    int tau(std::size_t l) const { return skips[l - 1]; }

    void validate() const {
        const std::size_t L = layers();
        if (L < 1) throw UnsupportedSpecError("NetworkSpec: need at least one layer");
        for (std::size_t w : widths)
            if (w < 1) throw UnsupportedSpecError("NetworkSpec: widths must be >= 1");
        if (skips.size() != L || premultipliers.size() != L)
            throw UnsupportedSpecError("NetworkSpec: skips/premultipliers must have L entries");
        for (std::size_t l = 1; l <= L; ++l) {
            if (skips[l - 1] != 0 && skips[l - 1] != 1)
                throw UnsupportedSpecError("NetworkSpec: skip flags must be 0 or 1");
            if (skips[l - 1] == 1 && widths[l] != widths[l - 1])
                throw UnsupportedSpecError("NetworkSpec: skip requires equal adjacent widths");
        }
        if (!(activity_decay >= 0.0))
            throw UnsupportedSpecError("NetworkSpec: activity_decay must be >= 0");
        if (parameterisation == Parameterisation::mupc) {
            for (std::size_t l = 1; l <= L; ++l) {
                double want;
                if (l == 1)
                    want = 1.0 / std::sqrt(static_cast<double>(widths[0]));
                else if (l == L)
                    want = 1.0 / static_cast<double>(widths[L - 1]);
                else
                    want = 1.0 / std::sqrt(static_cast<double>(widths[l - 1]) *
                                           static_cast<double>(L));
                if (std::abs(premultipliers[l - 1] - want) > 1e-12 * std::max(1.0, want))
                    throw UnsupportedSpecError("NetworkSpec: muPC premultipliers must match "
                                               "the prescribed layer scalings");
            }
        }
    }

    bool is_linear() const { return activation == Activation::linear; }
    bool has_skips() const {
        for (int t : skips)
            if (t) return true;
        return false;
    }
};

inline std::vector<double> default_premultipliers(const std::vector<std::size_t>& widths,
                                                  Parameterisation param) {
    const std::size_t L = widths.size() - 1;
    std::vector<double> a(L, 1.0);
    if (param == Parameterisation::mupc) {
        a[0] = 1.0 / std::sqrt(static_cast<double>(widths[0]));
        for (std::size_t l = 2; l < L; ++l)
            a[l - 1] = 1.0 / std::sqrt(static_cast<double>(widths[l - 1]) *
                                       static_cast<double>(L));
        if (L >= 2) a[L - 1] = 1.0 / static_cast<double>(widths[L - 1]);
    }
    return a;
}

/// Fully connected spec (no skips).
inline NetworkSpec make_fc_spec(std::vector<std::size_t> widths, Activation act,
                                Parameterisation param = Parameterisation::sp,
                                double activity_decay = 0.0) {
    NetworkSpec s;
    s.widths = std::move(widths);
    s.activation = act;
    s.parameterisation = param;
    s.activity_decay = activity_decay;
    s.skips.assign(s.layers(), 0);
    s.premultipliers = default_premultipliers(s.widths, param);
    s.validate();
    return s;
}

/// Residual spec: identity skips on every hidden transition (l = 2..H), none
/// from the input or into the output.
inline NetworkSpec make_resnet_spec(std::vector<std::size_t> widths, Activation act,
                                    Parameterisation param = Parameterisation::sp,
                                    double activity_decay = 0.0) {
    NetworkSpec s;
    s.widths = std::move(widths);
    s.activation = act;
    s.parameterisation = param;
    s.activity_decay = activity_decay;
    s.skips.assign(s.layers(), 0);
    for (std::size_t l = 2; l <= s.hidden(); ++l) s.skips[l - 1] = 1;
    s.premultipliers = default_premultipliers(s.widths, param);
    s.validate();
    return s;
}

/// Uniform-width chain helper: N_0 = ... = N_L = n with H hidden layers.
inline std::vector<std::size_t> uniform_widths(std::size_t hidden, std::size_t n) {
    return std::vector<std::size_t>(hidden + 2, n);
}

struct Weights {
    std::vector<Matrix> layers;  // W_l of shape N_l x N_{l-1}

    const Matrix& w(std::size_t l) const { return layers[l - 1]; }
    Matrix& w(std::size_t l) { return layers[l - 1]; }

    void validate_shapes(const NetworkSpec& spec) const {
        if (layers.size() != spec.layers()) throw ShapeError("Weights: wrong layer count");
        for (std::size_t l = 1; l <= spec.layers(); ++l) {
            if (w(l).rows() != spec.widths[l] || w(l).cols() != spec.widths[l - 1])
                throw ShapeError("Weights: W_" + std::to_string(l) + " has wrong shape");
            if (!w(l).all_finite())
                throw Error("Weights: W_" + std::to_string(l) + " has non-finite entries");
        }
    }
};

struct Activities {
    std::vector<Matrix> z;  // per hidden layer, batch-major (B x N_l)

    std::size_t batch_size() const { return z.empty() ? 0 : z.front().rows(); }
};

struct Batch {
    Matrix x;  // B x N_0
    Matrix y;  // B x N_L
    /// Optional 0/1 mask over target entries; masked-out entries contribute
    /// neither to the output error nor to the loss.
    std::optional<Matrix> y_mask;

    std::size_t size() const { return x.rows(); }

    void validate_shapes(const NetworkSpec& spec) const {
        if (x.rows() == 0) throw ShapeError("Batch: empty batch");
        if (x.rows() != y.rows()) throw ShapeError("Batch: x/y batch sizes differ");
        if (x.cols() != spec.input_dim()) throw ShapeError("Batch: x width != N_0");
        if (y.cols() != spec.output_dim()) throw ShapeError("Batch: y width != N_L");
        if (y_mask && (y_mask->rows() != y.rows() || y_mask->cols() != y.cols()))
            throw ShapeError("Batch: mask shape != y shape");
    }
};

namespace detail {

inline double apply_act(Activation a, double v) {
    switch (a) {
        case Activation::linear: return v;
        case Activation::tanh: return std::tanh(v);
        case Activation::relu: return v > 0.0 ? v : 0.0;
    }
    return v;
}

// ReLU derivative at 0 is taken as 0.
inline double apply_act_deriv(Activation a, double v) {
    switch (a) {
        case Activation::linear: return 1.0;
        case Activation::tanh: {
            const double t = std::tanh(v);
            return 1.0 - t * t;
        }
        case Activation::relu: return v > 0.0 ? 1.0 : 0.0;
    }
    return 1.0;
}

inline Matrix activate(Activation a, const Matrix& m) {
    if (a == Activation::linear) return m;
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = apply_act(a, m(i, j));
    return out;
}

inline Matrix activate_deriv(Activation a, const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = apply_act_deriv(a, m(i, j));
    return out;
}

// Activation on the transition into layer l: raw input passes through.
inline Matrix transition_input(const NetworkSpec& spec, std::size_t l, const Matrix& prev) {
    return (l == 1) ? prev : activate(spec.activation, prev);
}

// Layer map z_l = a_l W_l phi_l(z_{l-1}) + tau_l z_{l-1}, batch-major.
inline Matrix layer_map(const NetworkSpec& spec, const Weights& w, std::size_t l,
                        const Matrix& prev) {
    Matrix out = matmul_nt(transition_input(spec, l, prev), w.w(l));
    out *= spec.a(l);
    if (spec.tau(l)) out += prev;
    return out;
}

}  // namespace detail

/// Weight initialisation options. Defaults follow the parameterisation:
/// SP draws Gaussian entries with variance 1/N_{l-1}, muPC standard Gaussian,
/// orthogonal orthonormalises a Gaussian draw. `origin_scale` overrides all
/// of these with N(0, sigma^2) entries; `kaiming_uniform` switches SP to
/// U(-sqrt(1/N_{l-1}), +sqrt(1/N_{l-1})).
struct InitOptions {
    std::optional<double> origin_scale;
    bool kaiming_uniform = false;
};

namespace detail {

// Gram-Schmidt on columns, two passes. `g` must be tall or square.
inline Matrix orthonormal_columns(Matrix g) {
    const std::size_t rows = g.rows(), cols = g.cols();
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < cols; ++j) {
            for (std::size_t k = 0; k < j; ++k) {
                double d = 0.0;
                for (std::size_t i = 0; i < rows; ++i) d += g(i, k) * g(i, j);
                for (std::size_t i = 0; i < rows; ++i) g(i, j) -= d * g(i, k);
            }
            double n = 0.0;
            for (std::size_t i = 0; i < rows; ++i) n += g(i, j) * g(i, j);
            n = std::sqrt(n);
            if (n == 0.0) throw Error("orthogonal init: degenerate draw");
            for (std::size_t i = 0; i < rows; ++i) g(i, j) /= n;
        }
    }
    return g;
}

}  // namespace detail

inline Weights init_weights(const NetworkSpec& spec, Rng& rng, InitOptions opts = {}) {
    spec.validate();
    Weights w;
    w.layers.reserve(spec.layers());
    for (std::size_t l = 1; l <= spec.layers(); ++l) {
        const std::size_t rows = spec.widths[l], cols = spec.widths[l - 1];
        if (opts.origin_scale) {
            w.layers.push_back(rng.normal_matrix(rows, cols, *opts.origin_scale));
            continue;
        }
        switch (spec.parameterisation) {
            case Parameterisation::sp: {
                const double bound = std::sqrt(1.0 / static_cast<double>(cols));
                if (opts.kaiming_uniform) {
                    Matrix m(rows, cols);
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < cols; ++j)
                            m(i, j) = rng.uniform(-bound, bound);
                    w.layers.push_back(std::move(m));
                } else {
                    w.layers.push_back(rng.normal_matrix(rows, cols, bound));
                }
                break;
            }
            case Parameterisation::mupc:
                w.layers.push_back(rng.normal_matrix(rows, cols, 1.0));
                break;
            case Parameterisation::orthogonal: {
                // Orthonormal columns when tall, orthonormal rows when wide.
                if (rows >= cols) {
                    w.layers.push_back(detail::orthonormal_columns(rng.normal_matrix(rows, cols)));
                } else {
                    Matrix q = detail::orthonormal_columns(rng.normal_matrix(cols, rows));
                    w.layers.push_back(transpose(q));
                }
                break;
            }
        }
    }
    return w;
}

struct ForwardResult {
    Activities activities;  // hidden layers 1..H
    Matrix prediction;      // B x N_L
};

/// Layer-by-layer forward pass; throws OverflowError naming the first layer
/// that produces a non-finite value (expected for SP ResNets at large depth).
inline ForwardResult forward(const NetworkSpec& spec, const Weights& weights, const Matrix& x) {
    weights.validate_shapes(spec);
    if (x.cols() != spec.input_dim()) throw ShapeError("forward: x width != N_0");

    ForwardResult out;
    Matrix prev = x;
    for (std::size_t l = 1; l <= spec.layers(); ++l) {
        Matrix z = detail::layer_map(spec, weights, l, prev);
        if (!z.all_finite()) throw OverflowError("forward: non-finite activity", l);
        if (l < spec.layers()) out.activities.z.push_back(z);
        prev = std::move(z);
    }
    out.prediction = std::move(prev);
    return out;
}

namespace detail {

// Per-layer prediction errors eps_l = z_l - a_l W_l phi_l(z_{l-1}) - tau_l z_{l-1},
// with z_0 = x and z_L = y; the output error is masked when a mask is present.
inline std::vector<Matrix> residuals(const NetworkSpec& spec, const Weights& w,
                                     const Activities& acts, const Batch& batch) {
    const std::size_t L = spec.layers();
    std::vector<Matrix> eps;
    eps.reserve(L);
    const Matrix* prev = &batch.x;
    for (std::size_t l = 1; l <= L; ++l) {
        const Matrix& target = (l == L) ? batch.y : acts.z[l - 1];
        Matrix e = target - layer_map(spec, w, l, *prev);
        if (l == L && batch.y_mask) {
            const Matrix& m = *batch.y_mask;
            for (std::size_t i = 0; i < e.rows(); ++i)
                for (std::size_t j = 0; j < e.cols(); ++j) e(i, j) *= m(i, j);
        }
        eps.push_back(std::move(e));
        if (l < L) prev = &acts.z[l - 1];
    }
    return eps;
}

inline void require_model_shapes(const NetworkSpec& spec, const Weights& w,
                                 const Activities& acts, const Batch& batch) {
    w.validate_shapes(spec);
    batch.validate_shapes(spec);
    if (acts.z.size() != spec.hidden()) throw ShapeError("Activities: wrong layer count");
    for (std::size_t l = 1; l <= spec.hidden(); ++l)
        if (acts.z[l - 1].rows() != batch.size() || acts.z[l - 1].cols() != spec.widths[l])
            throw ShapeError("Activities: z_" + std::to_string(l) + " has wrong shape");
}

}  // namespace detail

struct EnergyBreakdown {
    double total = 0.0;
    std::vector<double> per_layer;  // sums to total; decay folded into hidden entries
};

/// Batch-mean energy F = (1/B) sum_i sum_l ||eps_{l,i}||^2 / 2, plus the
/// activity-decay term (alpha/2)||z_l||^2 per hidden layer when enabled.
inline EnergyBreakdown energy(const NetworkSpec& spec, const Weights& weights,
                              const Activities& acts, const Batch& batch) {
    detail::require_model_shapes(spec, weights, acts, batch);
    const double invB = 1.0 / static_cast<double>(batch.size());
    const auto eps = detail::residuals(spec, weights, acts, batch);

    EnergyBreakdown out;
    out.per_layer.resize(spec.layers(), 0.0);
    for (std::size_t l = 1; l <= spec.layers(); ++l) {
        double s = 0.0;
        for (std::size_t k = 0; k < eps[l - 1].size(); ++k)
            s += eps[l - 1].data()[k] * eps[l - 1].data()[k];
        out.per_layer[l - 1] = 0.5 * invB * s;
    }
    if (spec.activity_decay > 0.0) {
        for (std::size_t l = 1; l <= spec.hidden(); ++l) {
            double s = 0.0;
            for (std::size_t k = 0; k < acts.z[l - 1].size(); ++k)
                s += acts.z[l - 1].data()[k] * acts.z[l - 1].data()[k];
            out.per_layer[l - 1] += 0.5 * spec.activity_decay * invB * s;
        }
    }
    for (double v : out.per_layer) out.total += v;
    return out;
}

/// Per-sample energy gradient with respect to each hidden layer's activities
/// (no 1/B factor): dF_i/dz_l = eps_l - phi'_{l+1}(z_l) . (a_{l+1} W_{l+1}^T eps_{l+1})
///                               - tau_{l+1} eps_{l+1} + alpha z_l.
/// For linear networks this equals H_z z - b exactly.
inline std::vector<Matrix> activity_gradient(const NetworkSpec& spec, const Weights& weights,
                                             const Activities& acts, const Batch& batch) {
    detail::require_model_shapes(spec, weights, acts, batch);
    const auto eps = detail::residuals(spec, weights, acts, batch);

    std::vector<Matrix> grads;
    grads.reserve(spec.hidden());
    for (std::size_t l = 1; l <= spec.hidden(); ++l) {
        Matrix g = eps[l - 1];
        Matrix back = matmul(eps[l], weights.w(l + 1));  // B x N_l
        const double a_next = spec.a(l + 1);
        if (spec.activation == Activation::linear) {
            for (std::size_t k = 0; k < g.size(); ++k) g.data()[k] -= a_next * back.data()[k];
        } else {
            const Matrix d = detail::activate_deriv(spec.activation, acts.z[l - 1]);
            for (std::size_t k = 0; k < g.size(); ++k)
                g.data()[k] -= a_next * d.data()[k] * back.data()[k];
        }
        if (spec.tau(l + 1)) g -= eps[l];
        if (spec.activity_decay > 0.0) {
            for (std::size_t k = 0; k < g.size(); ++k)
                g.data()[k] += spec.activity_decay * acts.z[l - 1].data()[k];
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

/// Batch-mean energy gradient with respect to each weight matrix:
/// dF/dW_l = -(a_l / B) sum_i eps_{l,i} phi_l(z_{l-1,i})^T.
inline std::vector<Matrix> weight_gradient(const NetworkSpec& spec, const Weights& weights,
                                           const Activities& acts, const Batch& batch) {
    detail::require_model_shapes(spec, weights, acts, batch);
    const auto eps = detail::residuals(spec, weights, acts, batch);
    const double invB = 1.0 / static_cast<double>(batch.size());

    std::vector<Matrix> grads;
    grads.reserve(spec.layers());
    const Matrix* prev = &batch.x;
    for (std::size_t l = 1; l <= spec.layers(); ++l) {
        Matrix in = detail::transition_input(spec, l, *prev);
        Matrix g = matmul_tn(eps[l - 1], in);
        g *= -spec.a(l) * invB;
        grads.push_back(std::move(g));
        if (l < spec.layers()) prev = &acts.z[l - 1];
    }
    return grads;
}

struct LossAndGradient {
    double loss = 0.0;
    std::vector<Matrix> gradients;
};

/// MSE loss (1/2B) sum_i ||y_i - f(x_i)||^2 and its reverse-mode gradient
/// through the parameterised network map. With a target mask, masked entries
/// are dropped and the divisor counts only observed entries.
inline LossAndGradient mse_loss_and_bp_gradient(const NetworkSpec& spec, const Weights& weights,
                                                const Batch& batch) {
    weights.validate_shapes(spec);
    batch.validate_shapes(spec);
    const std::size_t L = spec.layers();

    // Forward, keeping every layer's state.
    std::vector<Matrix> zs;
    zs.reserve(L + 1);
    zs.push_back(batch.x);
    for (std::size_t l = 1; l <= L; ++l) {
        Matrix z = detail::layer_map(spec, weights, l, zs.back());
        if (!z.all_finite()) throw OverflowError("mse_loss: non-finite activity", l);
        zs.push_back(std::move(z));
    }

    Matrix r = zs[L] - batch.y;
    double denom = static_cast<double>(batch.size());
    if (batch.y_mask) {
        const Matrix& m = *batch.y_mask;
        double observed = 0.0;
        for (std::size_t k = 0; k < r.size(); ++k) {
            r.data()[k] *= m.data()[k];
            observed += m.data()[k];
        }
        denom = observed;
    }
    if (denom <= 0.0) throw Error("mse_loss: no observed target entries");

    LossAndGradient out;
    for (std::size_t k = 0; k < r.size(); ++k) out.loss += r.data()[k] * r.data()[k];
    out.loss *= 0.5 / denom;

    // Reverse pass: delta_L = r / denom, then
    // delta_{l-1} = phi'_l(z_{l-1}) . (a_l W_l^T delta_l) + tau_l delta_l.
    out.gradients.resize(L);
    Matrix delta = r;
    delta *= 1.0 / denom;
    for (std::size_t l = L; l >= 1; --l) {
        Matrix in = detail::transition_input(spec, l, zs[l - 1]);
        Matrix g = matmul_tn(delta, in);
        g *= spec.a(l);
        out.gradients[l - 1] = std::move(g);
        if (l == 1) break;
        Matrix back = matmul(delta, weights.w(l));  // B x N_{l-1}
        const double a_l = spec.a(l);
        if (spec.activation == Activation::linear) {
            for (std::size_t k = 0; k < back.size(); ++k) back.data()[k] *= a_l;
        } else {
            const Matrix d = detail::activate_deriv(spec.activation, zs[l - 1]);
            for (std::size_t k = 0; k < back.size(); ++k) back.data()[k] *= a_l * d.data()[k];
        }
        if (spec.tau(l)) back += delta;
        delta = std::move(back);
    }
    return out;
}

/// Total product map of a linear network, premultipliers and skips folded in:
/// x -> a_L W_L (prod over hidden transitions) a_1 W_1 x, as a single matrix.
inline Matrix linear_network_map(const NetworkSpec& spec, const Weights& weights) {
    if (!spec.is_linear()) throw UnsupportedSpecError("linear_network_map: nonlinear spec");
    weights.validate_shapes(spec);
    Matrix p = weights.w(1) * spec.a(1);
    if (spec.tau(1)) p += Matrix::identity(p.rows());
    for (std::size_t l = 2; l <= spec.layers(); ++l) {
        Matrix b = weights.w(l) * spec.a(l);
        Matrix next = matmul(b, p);
        if (spec.tau(l)) next += p;
        p = std::move(next);
    }
    return p;
}

}  // namespace pcn
