#include <gtest/gtest.h>

#include <cmath>

#include "pcn/inference.hpp"
#include "pcn/network.hpp"
#include "pcn/theory.hpp"

using namespace pcn;

namespace {

Batch single_pair(double x, double y) {
    Batch b;
    b.x = Matrix(1, 1, {x});
    b.y = Matrix(1, 1, {y});
    return b;
}

double max_layer_dev(const Activities& a, const Activities& b) {
    double m = 0.0;
    for (std::size_t l = 0; l < a.z.size(); ++l) {
        const Matrix d = a.z[l] - b.z[l];
        m = std::max(m, d.max_abs());
    }
    return m;
}

}  // namespace

TEST(GdInference, AlreadyConvergedDoesNothing) {
    const auto spec = make_fc_spec({2, 3, 2}, Activation::tanh);
    Rng rng(2);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(3, 2);
    const ForwardResult f = forward(spec, w, b.x);
    b.y = f.prediction;

    InferenceConfig cfg;
    cfg.max_steps = 50;
    const InferenceResult res = gd_inference(spec, w, f.activities, b, cfg);
    EXPECT_TRUE(res.trace.converged);
    EXPECT_EQ(res.trace.steps, 0u);
    EXPECT_LT(max_layer_dev(res.activities, f.activities), 1e-15);
}

TEST(GdInference, MatchesAnalyticSolutionOnDln) {
    const auto spec = make_fc_spec({4, 4, 4, 4}, Activation::linear);  // H = 2, N = 4
    Rng rng(3);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(2, 4);
    b.y = rng.normal_matrix(2, 4);

    const Activities exact = analytic_dln_inference(spec, w, b);
    InferenceConfig cfg;
    cfg.step_size = 0.1;
    cfg.max_steps = 500;
    cfg.grad_tol = 1e-10;
    const InferenceResult res =
        gd_inference(spec, w, forward(spec, w, b.x).activities, b, cfg);
    EXPECT_LT(max_layer_dev(res.activities, exact), 1e-6);
}

TEST(GdInference, OneMlpEquilibrium) {
    // z* = (w1 x + w2 y) / (1 + w2^2) = 0 for w = (1,1), x = 1, y = -1.
    const auto spec = make_fc_spec({1, 1, 1}, Activation::linear);
    Weights w;
    w.layers = {Matrix(1, 1, {1.0}), Matrix(1, 1, {1.0})};
    const Batch b = single_pair(1.0, -1.0);
    InferenceConfig cfg;
    cfg.step_size = 0.2;
    cfg.max_steps = 500;
    cfg.grad_tol = 1e-12;
    const InferenceResult res =
        gd_inference(spec, w, forward(spec, w, b.x).activities, b, cfg);
    EXPECT_NEAR(res.activities.z[0](0, 0), 0.0, 1e-10);
}

TEST(GdInference, EnergyNonIncreasingUnderCurvatureBound) {
    const auto spec = make_fc_spec({3, 5, 5, 3}, Activation::linear);
    Rng rng(7);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(4, 3);
    b.y = rng.normal_matrix(4, 3);

    const Matrix hz = assemble_activity_hessian(spec, w, HessianVariant::pc_fc);
    const double lmax = sym_eigvals(hz).back();
    InferenceConfig cfg;
    cfg.step_size = 1.0 / lmax;
    cfg.max_steps = 200;
    cfg.grad_tol = 0.0;
    Activities init;
    for (std::size_t l = 1; l <= spec.hidden(); ++l) init.z.push_back(rng.normal_matrix(4, 5));
    const InferenceResult res = gd_inference(spec, w, init, b, cfg);
    for (std::size_t t = 1; t < res.trace.energies.size(); ++t)
        EXPECT_LE(res.trace.energies[t], res.trace.energies[t - 1] + 1e-12);
}

TEST(GdInference, ConvexLandscapeUniqueFixedPoint) {
    const auto spec = make_fc_spec({3, 4, 4, 2}, Activation::linear);
    Rng rng(11);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(2, 3);
    b.y = rng.normal_matrix(2, 2);
    InferenceConfig cfg;
    cfg.step_size = 0.1;
    cfg.max_steps = 3000;
    cfg.grad_tol = 1e-12;

    Activities reference;
    for (int start = 0; start < 10; ++start) {
        Activities init;
        init.z.push_back(rng.normal_matrix(2, 4));
        init.z.push_back(rng.normal_matrix(2, 4));
        const InferenceResult res = gd_inference(spec, w, init, b, cfg);
        if (start == 0)
            reference = res.activities;
        else
            EXPECT_LT(max_layer_dev(res.activities, reference), 1e-6);
    }
}

TEST(GdInference, DivergenceThrowsWithStep) {
    const auto spec = make_fc_spec({2, 4, 2}, Activation::linear);
    Rng rng(13);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(2, 2);
    b.y = rng.normal_matrix(2, 2);
    InferenceConfig cfg;
    cfg.step_size = 50.0;  // far beyond 2 / lambda_max
    cfg.max_steps = 5000;
    cfg.grad_tol = 0.0;
    EXPECT_THROW(
        gd_inference(spec, w, forward(spec, w, b.x).activities, b, cfg),
        DivergenceError);
}

TEST(GdInference, HalvingScheduleRecoversFromLargeStep) {
    const auto spec = make_fc_spec({2, 4, 2}, Activation::linear);
    Rng rng(17);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(2, 2);
    b.y = rng.normal_matrix(2, 2);

    const Matrix hz = assemble_activity_hessian(spec, w, HessianVariant::pc_fc);
    const double lmax = sym_eigvals(hz).back();
    InferenceConfig cfg;
    cfg.step_size = 3.0 / lmax;  // oscillates without halving
    cfg.max_steps = 400;
    cfg.grad_tol = 1e-9;
    cfg.halving_schedule = 2;
    const InferenceResult res =
        gd_inference(spec, w, forward(spec, w, b.x).activities, b, cfg);
    const Activities exact = analytic_dln_inference(spec, w, b);
    EXPECT_LT(max_layer_dev(res.activities, exact), 1e-5);
}

TEST(GdInference, UnclampedOutputConvergesToForwardPass) {
    const auto spec = make_fc_spec({3, 4, 4, 2}, Activation::linear);
    Rng rng(19);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(2, 3);
    b.y = Matrix(2, 2);  // ignored in diagnostic mode

    const ForwardResult f = forward(spec, w, b.x);
    Activities init;
    init.z.push_back(rng.normal_matrix(2, 4));
    init.z.push_back(rng.normal_matrix(2, 4));
    InferenceConfig cfg;
    cfg.step_size = 0.2;
    cfg.max_steps = 5000;
    cfg.grad_tol = 1e-12;
    cfg.clamp_output = false;
    const InferenceResult res = gd_inference(spec, w, init, b, cfg);
    ASSERT_TRUE(res.free_output.has_value());
    EXPECT_LT(max_layer_dev(res.activities, f.activities), 1e-6);
    const Matrix d = *res.free_output - f.prediction;
    EXPECT_LT(d.max_abs(), 1e-6);
}

TEST(HeunInference, ZeroGradientUnchanged) {
    const auto spec = make_fc_spec({2, 3, 2}, Activation::tanh);
    Rng rng(23);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(3, 2);
    const ForwardResult f = forward(spec, w, b.x);
    b.y = f.prediction;
    InferenceConfig cfg;
    cfg.solver = InferenceSolver::heun;
    cfg.max_steps = 10;
    const InferenceResult res = heun_inference(spec, w, f.activities, b, cfg);
    EXPECT_TRUE(res.trace.converged);
    EXPECT_LT(max_layer_dev(res.activities, f.activities), 1e-15);
}

TEST(HeunInference, SameFixedPointAsGd) {
    const auto spec = make_fc_spec({3, 4, 4, 3}, Activation::linear);
    Rng rng(29);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(2, 3);
    b.y = rng.normal_matrix(2, 3);

    InferenceConfig cfg;
    cfg.solver = InferenceSolver::heun;
    cfg.step_size = 0.2;
    cfg.max_steps = 2000;
    cfg.grad_tol = 1e-12;
    const InferenceResult heun =
        heun_inference(spec, w, forward(spec, w, b.x).activities, b, cfg);
    const Activities exact = analytic_dln_inference(spec, w, b);
    EXPECT_LT(max_layer_dev(heun.activities, exact), 1e-6);
}

TEST(HeunInference, OneStepMatchesHandComputation) {
    // 1MLP with w = (1,1), x = 1, y = -1: per-sample gradient g(z) = 2z.
    // From z = 1 with dt = 0.1: predictor 0.8, corrected 1 - 0.05*(2+1.6) = 0.82.
    const auto spec = make_fc_spec({1, 1, 1}, Activation::linear);
    Weights w;
    w.layers = {Matrix(1, 1, {1.0}), Matrix(1, 1, {1.0})};
    const Batch b = single_pair(1.0, -1.0);
    Activities init;
    init.z.push_back(Matrix(1, 1, {1.0}));
    InferenceConfig cfg;
    cfg.solver = InferenceSolver::heun;
    cfg.step_size = 0.1;
    cfg.max_steps = 1;
    cfg.grad_tol = 0.0;
    const InferenceResult res = heun_inference(spec, w, init, b, cfg);
    EXPECT_NEAR(res.activities.z[0](0, 0), 0.82, 1e-15);
}

TEST(HeunInference, SecondOrderLocalAccuracy) {
    // One Heun step vs one Euler step on a linear problem: halving dt must
    // roughly quarter the one-step discrepancy (they differ at O(dt^2)).
    const auto spec = make_fc_spec({2, 3, 2}, Activation::linear);
    Rng rng(31);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(1, 2);
    b.y = rng.normal_matrix(1, 2);
    Activities init;
    init.z.push_back(rng.normal_matrix(1, 3));

    auto one_step_gap = [&](double dt) {
        InferenceConfig heun_cfg;
        heun_cfg.solver = InferenceSolver::heun;
        heun_cfg.step_size = dt;
        heun_cfg.max_steps = 1;
        heun_cfg.grad_tol = 0.0;
        InferenceConfig gd_cfg = heun_cfg;
        gd_cfg.solver = InferenceSolver::gd;
        const InferenceResult h = heun_inference(spec, w, init, b, heun_cfg);
        const InferenceResult g = gd_inference(spec, w, init, b, gd_cfg);
        return max_layer_dev(h.activities, g.activities);
    };

    const double gap1 = one_step_gap(0.2);
    const double gap2 = one_step_gap(0.1);
    EXPECT_NEAR(gap1 / gap2, 4.0, 0.2);
}

TEST(AnalyticInference, ZeroWeightsGiveZeroActivities) {
    const auto spec = make_fc_spec({2, 3, 2}, Activation::linear);
    Weights w;
    w.layers = {Matrix(3, 2), Matrix(2, 3)};
    Batch b;
    b.x = Matrix(1, 2, {1.0, -2.0});
    b.y = Matrix(1, 2, {0.5, 0.5});
    const Activities z = analytic_dln_inference(spec, w, b);
    EXPECT_DOUBLE_EQ(z.z[0].max_abs(), 0.0);
}

TEST(AnalyticInference, OneMlpClosedForm) {
    const auto spec = make_fc_spec({1, 1, 1}, Activation::linear);
    Weights w;
    w.layers = {Matrix(1, 1, {1.0}), Matrix(1, 1, {1.0})};
    const Batch b = single_pair(1.0, -1.0);
    const Activities z = analytic_dln_inference(spec, w, b);
    EXPECT_NEAR(z.z[0](0, 0), 0.0, 1e-15);
}

TEST(AnalyticInference, GradientVanishesAtSolution) {
    const auto spec = make_fc_spec({5, 5, 5, 5, 5}, Activation::linear);  // H = 3, N = 5
    Rng rng(37);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(3, 5);
    b.y = rng.normal_matrix(3, 5);
    const Activities z = analytic_dln_inference(spec, w, b);
    for (const Matrix& g : activity_gradient(spec, w, z, b)) EXPECT_LT(g.max_abs(), 1e-8);
}

TEST(AnalyticInference, ResNetVariant) {
    const auto spec = make_resnet_spec(uniform_widths(4, 6), Activation::linear,
                                       Parameterisation::mupc);
    Rng rng(41);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(2, 6);
    b.y = rng.normal_matrix(2, 6);
    const Activities z = analytic_dln_inference(spec, w, b);
    for (const Matrix& g : activity_gradient(spec, w, z, b)) EXPECT_LT(g.max_abs(), 1e-8);
}

TEST(AnalyticInference, RejectsNonlinearSpec) {
    const auto spec = make_fc_spec({2, 3, 2}, Activation::tanh);
    Rng rng(43);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(1, 2);
    b.y = rng.normal_matrix(1, 2);
    EXPECT_THROW(analytic_dln_inference(spec, w, b), UnsupportedSpecError);
}

TEST(InferenceTrace, LengthsMatchSteps) {
    const auto spec = make_fc_spec({2, 3, 2}, Activation::linear);
    Rng rng(47);
    const Weights w = init_weights(spec, rng);
    Batch b;
    b.x = rng.normal_matrix(2, 2);
    b.y = rng.normal_matrix(2, 2);
    InferenceConfig cfg;
    cfg.step_size = 0.05;
    cfg.max_steps = 17;
    cfg.grad_tol = 0.0;
    const InferenceResult res =
        gd_inference(spec, w, forward(spec, w, b.x).activities, b, cfg);
    EXPECT_EQ(res.trace.steps, 17u);
    EXPECT_EQ(res.trace.energies.size(), 17u);
    EXPECT_EQ(res.trace.grad_norms.size(), 17u);
}
