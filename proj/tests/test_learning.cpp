#include <gtest/gtest.h>

#include <cmath>

#include "pcn/data.hpp"
#include "pcn/learning.hpp"
#include "pcn/theory.hpp"

using namespace pcn;

namespace {

Batch single_pair(double x, double y) {
    Batch b;
    b.x = Matrix(1, 1, {x});
    b.y = Matrix(1, 1, {y});
    return b;
}

}  // namespace

TEST(SgdStep, ZeroGradientUnchanged) {
    Weights w;
    w.layers = {Matrix(2, 2, {1, 2, 3, 4})};
    const Weights out = sgd_step(w, {Matrix(2, 2)}, 0.1);
    const Matrix d = out.layers[0] - w.layers[0];
    EXPECT_DOUBLE_EQ(d.max_abs(), 0.0);
}

TEST(SgdStep, ScalarArithmetic) {
    Weights w;
    w.layers = {Matrix(1, 1, {1.0})};
    const Weights out = sgd_step(w, {Matrix(1, 1, {2.0})}, 0.1);
    EXPECT_DOUBLE_EQ(out.layers[0](0, 0), 0.8);
}

TEST(SgdStep, TwoStepsEqualSummedDisplacement) {
    Weights w;
    w.layers = {Matrix(1, 1, {0.5})};
    const std::vector<Matrix> g = {Matrix(1, 1, {0.3})};
    const Weights twice = sgd_step(sgd_step(w, g, 0.05), g, 0.05);
    const Weights once = sgd_step(w, g, 0.1);
    EXPECT_NEAR(twice.layers[0](0, 0), once.layers[0](0, 0), 1e-15);
}

TEST(SgdStep, NonFiniteGradientAborts) {
    Weights w;
    w.layers = {Matrix(1, 1, {1.0})};
    Matrix bad(1, 1);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(sgd_step(w, {bad}, 0.1), Error);
}

TEST(AdamStep, ZeroGradientFromFreshState) {
    Weights w;
    w.layers = {Matrix(2, 2, {1, 2, 3, 4})};
    auto [out, st] = adam_step(w, {Matrix(2, 2)}, make_adam(0.1));
    const Matrix d = out.layers[0] - w.layers[0];
    EXPECT_DOUBLE_EQ(d.max_abs(), 0.0);
    EXPECT_EQ(st.step_count, 1u);
}

TEST(AdamStep, FirstStepIsLearningRateSized) {
    // Bias-corrected first step: delta = -eta * g / (|g| + eps) = -eta up to eps.
    Weights w;
    w.layers = {Matrix(1, 1, {0.0})};
    auto [out, st] = adam_step(w, {Matrix(1, 1, {1.0})}, make_adam(0.1));
    EXPECT_NEAR(out.layers[0](0, 0), -0.1, 1e-7);
}

TEST(AdamStep, UpdateSignOpposesGradient) {
    Rng rng(5);
    Weights w;
    w.layers = {rng.normal_matrix(3, 3)};
    std::vector<Matrix> g = {rng.normal_matrix(3, 3)};
    auto [out, st] = adam_step(w, g, make_adam(0.01));
    for (std::size_t k = 0; k < 9; ++k) {
        const double delta = out.layers[0].data()[k] - w.layers[0].data()[k];
        if (g[0].data()[k] != 0.0) EXPECT_LT(delta * g[0].data()[k], 0.0);
    }
}

TEST(PcTrainStep, PerfectPredictionNoChange) {
    const auto spec = make_fc_spec({2, 3, 2}, Activation::tanh);
    Rng rng(7);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(3, 2);
    b.y = forward(spec, w, b.x).prediction;
    TrainConfig cfg;
    cfg.inference.max_steps = 20;
    const TrainStepResult res = pc_train_step(spec, w, b, cfg, make_sgd(0.1));
    for (std::size_t l = 0; l < 2; ++l) {
        const Matrix d = res.weights.layers[l] - w.layers[l];
        EXPECT_LT(d.max_abs(), 1e-12);
    }
    EXPECT_NEAR(res.metrics.loss, 0.0, 1e-24);
}

TEST(PcTrainStep, OneMlpEquilibriumUpdate) {
    // At the z = 0 equilibrium of the 1MLP, dF/dw1 = 1 and dF/dw2 = 0.
    const auto spec = make_fc_spec({1, 1, 1}, Activation::linear);
    Weights w;
    w.layers = {Matrix(1, 1, {1.0}), Matrix(1, 1, {1.0})};
    const Batch b = single_pair(1.0, -1.0);
    TrainConfig cfg;
    cfg.analytic_inference = true;
    const double eta = 0.05;
    const TrainStepResult res = pc_train_step(spec, w, b, cfg, make_sgd(eta));
    EXPECT_NEAR(res.weights.layers[0](0, 0), 1.0 - eta * 1.0, 1e-12);
    EXPECT_NEAR(res.weights.layers[1](0, 0), 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(res.metrics.loss, 2.0);
    EXPECT_DOUBLE_EQ(res.metrics.pre_energy, 2.0);
    EXPECT_NEAR(res.metrics.post_energy, 1.0, 1e-12);  // F* = L / (1 + w2^2)
}

TEST(PcTrainStep, AnalyticUpdateMatchesEquilibratedEnergyGradient) {
    // With exact inference the PC weight gradient is the gradient of the
    // closed-form rescaled loss; check against finite differences of F*.
    const auto spec = make_fc_spec({3, 4, 4, 2}, Activation::linear);
    Rng rng(11);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(4, 3);
    b.y = rng.normal_matrix(4, 2);

    const Activities z = analytic_dln_inference(spec, w, b);
    const auto grads = weight_gradient(spec, w, z, b);
    const Vector fd = numerical_gradient(equilibrated_energy_fn(spec, b), flatten_weights(w), 1e-4);
    std::size_t k = 0;
    for (const Matrix& g : grads)
        for (std::size_t i = 0; i < g.size(); ++i, ++k)
            EXPECT_NEAR(g.data()[i], fd[k], 1e-4 * std::max(1.0, std::abs(fd[k])));
}

TEST(PcTrainStep, SkippedInferenceIsUnclampedEquivalent) {
    // With inference skipped the activities sit at the forward pass, where
    // the energy as a function of theta is identically the loss. Its theta
    // gradient therefore equals the BP gradient; of the partial derivatives
    // at fixed activities, the output layer's already coincides exactly and
    // the hidden ones vanish with the hidden errors.
    const auto spec = make_fc_spec({3, 5, 2}, Activation::tanh);
    Rng rng(13);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(4, 3);
    b.y = rng.normal_matrix(4, 2);

    const auto bp = mse_loss_and_bp_gradient(spec, w, b);
    const ScalarFn energy_at_forward = [&spec, &b](const Vector& theta) {
        const Weights wt = unflatten_weights(spec, theta);
        return energy(spec, wt, forward(spec, wt, b.x).activities, b).total;
    };
    const Vector fd = numerical_gradient(energy_at_forward, flatten_weights(w), 1e-5);
    std::size_t k = 0;
    for (const Matrix& g : bp.gradients)
        for (std::size_t i = 0; i < g.size(); ++i, ++k)
            EXPECT_NEAR(g.data()[i], fd[k], 1e-6 * std::max(1.0, std::abs(fd[k])));

    const ForwardResult f = forward(spec, w, b.x);
    const auto pc_partials = weight_gradient(spec, w, f.activities, b);
    const Matrix d_out = pc_partials.back() - bp.gradients.back();
    EXPECT_LT(d_out.max_abs(), 1e-13);
    EXPECT_LT(pc_partials.front().max_abs(), 1e-13);
}

TEST(BpTrainStep, ZeroLossNoChange) {
    const auto spec = make_fc_spec({2, 3, 2}, Activation::relu);
    Rng rng(17);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(3, 2);
    b.y = forward(spec, w, b.x).prediction;
    const TrainStepResult res = bp_train_step(spec, w, b, {}, make_sgd(0.1));
    for (std::size_t l = 0; l < 2; ++l) {
        const Matrix d = res.weights.layers[l] - w.layers[l];
        EXPECT_LT(d.max_abs(), 1e-12);
    }
}

TEST(BpTrainStep, OneMlpHandUpdate) {
    const auto spec = make_fc_spec({1, 1, 1}, Activation::linear);
    Weights w;
    w.layers = {Matrix(1, 1, {1.0}), Matrix(1, 1, {1.0})};
    const Batch b = single_pair(1.0, -1.0);
    const TrainStepResult res = bp_train_step(spec, w, b, {}, make_sgd(0.1));
    EXPECT_NEAR(res.weights.layers[0](0, 0), 0.8, 1e-15);
    EXPECT_NEAR(res.weights.layers[1](0, 0), 0.8, 1e-15);
}

TEST(BpTrainStep, LossDecreasesOnToyRegression) {
    const auto spec = make_fc_spec({1, 4, 1}, Activation::tanh);
    Rng rng(19);
    Weights w = init_weights(spec, rng);
    const Dataset d = toy_regression(64, rng);
    Batch b;
    b.x = d.inputs;
    b.y = d.targets;
    OptimState optim = make_sgd(0.05);
    double prev = mse_loss_and_bp_gradient(spec, w, b).loss;
    for (int step = 0; step < 10; ++step) {
        TrainStepResult res = bp_train_step(spec, w, b, {}, optim);
        w = std::move(res.weights);
        optim = std::move(res.optim);
        const double now = mse_loss_and_bp_gradient(spec, w, b).loss;
        EXPECT_LT(now, prev);
        prev = now;
    }
}

TEST(Evaluate, PerfectPredictionsScoreOne) {
    const auto spec = make_fc_spec({4, 4}, Activation::linear);
    Weights w;
    w.layers = {Matrix::identity(4)};
    Rng rng(23);
    Matrix xs(6, 4);
    Matrix ys(6, 4);
    for (std::size_t i = 0; i < 6; ++i) {
        const std::size_t c = i % 4;
        xs(i, c) = 1.0;
        ys(i, c) = 1.0;
    }
    const EvalResult r = evaluate(spec, w, xs, ys);
    EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
    EXPECT_NEAR(r.loss, 0.0, 1e-24);
}

TEST(Evaluate, ConstantPredictorOnBalancedClassesIsChance) {
    // Zero weights predict the zero vector; argmax ties resolve to class 0,
    // so accuracy equals the share of class-0 samples: 1/10.
    const auto spec = make_fc_spec({4, 10}, Activation::linear);
    Weights w;
    w.layers = {Matrix(10, 4)};
    Rng rng(29);
    const std::size_t n = 200;
    Matrix xs = rng.normal_matrix(n, 4);
    Matrix ys(n, 10);
    for (std::size_t i = 0; i < n; ++i) ys(i, i % 10) = 1.0;
    const EvalResult r = evaluate(spec, w, xs, ys);
    EXPECT_NEAR(r.accuracy, 0.1, 1e-12);
}

TEST(Evaluate, HandBuiltTwoOfThree) {
    const auto spec = make_fc_spec({2, 2}, Activation::linear);
    Weights w;
    w.layers = {Matrix::identity(2)};
    Matrix xs(3, 2, {1, 0, 0, 1, 1, 0});
    Matrix ys(3, 2, {1, 0, 0, 1, 0, 1});  // third sample mislabelled
    const EvalResult r = evaluate(spec, w, xs, ys);
    EXPECT_NEAR(r.accuracy, 2.0 / 3.0, 1e-12);
}

TEST(Determinism, IdenticalSeedsGiveIdenticalRuns) {
    const auto spec = make_fc_spec({2, 4, 2}, Activation::tanh);
    auto run = [&spec]() {
        Rng rng(31);
        Weights w = init_weights(spec, rng);
        const Dataset d = toy_regression(32, rng);
        std::vector<double> losses;
        OptimState optim = make_adam(1e-2);
        TrainConfig cfg;
        cfg.inference.max_steps = 10;
        cfg.inference.step_size = 0.1;
        Rng shuffle_rng = rng.derive(1);
        for (int epoch = 0; epoch < 2; ++epoch) {
            Batch full;
            full.x = Matrix(32, 2);
            full.y = Matrix(32, 2);
            for (std::size_t i = 0; i < 32; ++i) {
                full.x(i, 0) = d.inputs(i, 0);
                full.x(i, 1) = -d.inputs(i, 0);
                full.y(i, 0) = d.targets(i, 0);
                full.y(i, 1) = -d.targets(i, 0);
            }
            (void)shuffle_rng;
            TrainStepResult res = pc_train_step(spec, w, full, cfg, optim);
            w = std::move(res.weights);
            optim = std::move(res.optim);
            losses.push_back(res.metrics.loss);
        }
        return losses;
    };
    const auto a = run();
    const auto b = run();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);  // bit-identical
}
