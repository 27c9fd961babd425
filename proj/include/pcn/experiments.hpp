#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "pcn/data.hpp"
#include "pcn/inference.hpp"
#include "pcn/io.hpp"
#include "pcn/learning.hpp"
#include "pcn/theory.hpp"

namespace pcn {

constexpr const char* kVersion = "0.1.0";

struct ExperimentContext {
    KeyValueConfig config;
    std::filesystem::path out_dir;
    std::uint64_t seed = 0;
};

namespace detail {

inline std::chrono::steady_clock::time_point now() { return std::chrono::steady_clock::now(); }

inline long long ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(now() - t0).count();
}

inline void write_manifest(const ExperimentContext& ctx, const std::string& subcommand,
                           long long elapsed_ms,
                           const std::vector<std::string>& outputs) {
    nlohmann::json j;
    j["subcommand"] = subcommand;
    j["version"] = kVersion;
    j["seed"] = ctx.seed;
    j["elapsed_ms"] = elapsed_ms;
    j["outputs"] = outputs;
    nlohmann::json cfg;
    for (const auto& [k, v] : ctx.config.entries()) cfg[k] = v;
    j["config"] = cfg;
    std::ofstream out(ctx.out_dir / "manifest.json");
    out << j.dump(2) << "\n";
}

/// Runs fn(0..n-1) on a small worker pool; callers write results into
/// pre-sized slots so output order stays deterministic.
inline void parallel_cells(std::size_t n, std::size_t workers,
                           const std::function<void(std::size_t)>& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace detail

inline void write_trace_csv(const std::string& path, const InferenceTrace& trace) {
    CsvWriter csv(path, {"step", "energy", "grad_norm"});
    for (std::size_t t = 0; t < trace.energies.size(); ++t)
        csv.row({cell(t), cell(trace.energies[t]), cell(trace.grad_norms[t])});
}

inline void write_weights(const std::string& path, const Weights& w) {
    std::ofstream out(path);
    if (!out) throw Error("write_weights: cannot open " + path);
    out << w.layers.size() << "\n";
    for (const Matrix& m : w.layers) {
        out << m.rows() << " " << m.cols() << "\n";
        for (std::size_t i = 0; i < m.rows(); ++i) {
            for (std::size_t j = 0; j < m.cols(); ++j) {
                if (j) out << " ";
                out << format_double(m(i, j));
            }
            out << "\n";
        }
    }
}

inline Weights read_weights(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("read_weights: cannot open " + path);
    std::size_t layers = 0;
    in >> layers;
    Weights w;
    for (std::size_t l = 0; l < layers; ++l) {
        std::size_t r = 0, c = 0;
        in >> r >> c;
        Matrix m(r, c);
        for (std::size_t k = 0; k < m.size(); ++k) in >> m.data()[k];
        w.layers.push_back(std::move(m));
    }
    if (!in) throw Error("read_weights: malformed file " + path);
    return w;
}

// ---------------------------------------------------------------------------
// Shared config plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline InferenceConfig inference_from_config(const KeyValueConfig& cfg) {
    InferenceConfig inf;
    const std::string solver = cfg.get_string("inference_solver", "gd");
    if (solver == "gd")
        inf.solver = InferenceSolver::gd;
    else if (solver == "heun")
        inf.solver = InferenceSolver::heun;
    else
        throw Error("unknown inference_solver '" + solver + "' (expected gd|heun)");
    inf.step_size = cfg.get_double("inference_step_size", 0.1);
    inf.max_steps = static_cast<std::size_t>(cfg.get_int("inference_steps", 100));
    inf.grad_tol = cfg.get_double("inference_grad_tol", 1e-6);
    if (cfg.has("inference_halvings"))
        inf.halving_schedule = static_cast<int>(cfg.get_int("inference_halvings"));
    return inf;
}

struct TrainData {
    Dataset train;
    Dataset test;
};

inline TrainData dataset_from_config(const KeyValueConfig& cfg, Rng& rng) {
    const std::string name = cfg.get_string("dataset", "prototype");
    TrainData d;
    if (name == "mnist_idx") {
        d.train = load_mnist_idx(cfg.get_string("train_images"), cfg.get_string("train_labels"));
        d.test = load_mnist_idx(cfg.get_string("test_images"), cfg.get_string("test_labels"));
        return d;
    }
    const std::size_t ntrain = static_cast<std::size_t>(cfg.get_int("train_size", 10000));
    const std::size_t ntest = static_cast<std::size_t>(cfg.get_int("test_size", 2000));
    Rng train_rng = rng.derive(101);
    Rng test_rng = rng.derive(202);
    if (name == "toy_regression") {
        d.train = toy_regression(ntrain, train_rng);
        d.test = toy_regression(ntest, test_rng);
    } else if (name == "mnist_like") {
        d.train = mnist_like(ntrain, train_rng);
        d.test = mnist_like(ntest, test_rng);
    } else if (name == "prototype") {
        // One generator so train and test share prototypes, then split.
        Rng gen = rng.derive(303);
        const double noise = cfg.get_double("noise", 0.35);
        const std::size_t side = static_cast<std::size_t>(cfg.get_int("image_side", 28));
        Dataset all = prototype_classification(ntrain + ntest, gen, noise, side);
        d.train.name = d.test.name = all.name;
        d.train.inputs = Matrix(ntrain, all.inputs.cols());
        d.train.targets = Matrix(ntrain, all.targets.cols());
        d.test.inputs = Matrix(ntest, all.inputs.cols());
        d.test.targets = Matrix(ntest, all.targets.cols());
        for (std::size_t i = 0; i < ntrain; ++i) {
            for (std::size_t j = 0; j < all.inputs.cols(); ++j)
                d.train.inputs(i, j) = all.inputs(i, j);
            for (std::size_t j = 0; j < all.targets.cols(); ++j)
                d.train.targets(i, j) = all.targets(i, j);
        }
        for (std::size_t i = 0; i < ntest; ++i) {
            for (std::size_t j = 0; j < all.inputs.cols(); ++j)
                d.test.inputs(i, j) = all.inputs(ntrain + i, j);
            for (std::size_t j = 0; j < all.targets.cols(); ++j)
                d.test.targets(i, j) = all.targets(ntrain + i, j);
        }
    } else {
        throw Error("unknown dataset '" + name +
                    "' (expected prototype|mnist_like|toy_regression|mnist_idx)");
    }
    return d;
}

inline void maybe_standardize(const KeyValueConfig& cfg, TrainData& d) {
    if (cfg.get_int("standardize", 0) != 0) {
        const auto stats = standardize_inputs(d.train);
        apply_standardization(d.test, stats);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// cmd_train
// ---------------------------------------------------------------------------

struct TrainRunResult {
    Weights weights;
    double final_test_loss = 0.0;
    double final_test_accuracy = 0.0;
    double best_test_accuracy = 0.0;
    double min_train_loss = std::numeric_limits<double>::infinity();
    bool diverged = false;
};

/// Training loop shared by cmd_train and the grid experiments. Metrics are
/// logged on the pre-update weights; a diverging step ends the run with the
/// flag set (the last finite weights are kept and evaluated).
inline TrainRunResult train_loop(const NetworkSpec& spec, Weights weights,
                                 const detail::TrainData& data, const TrainConfig& cfg,
                                 OptimState optim, CsvWriter* csv,
                                 bool classification) {
    TrainRunResult out;
    Rng shuffle_rng = Rng(cfg.seed).derive(7);
    const auto t0 = detail::now();
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs && !out.diverged; ++epoch) {
        for (const Batch& batch : batches(data.train, cfg.batch_size, shuffle_rng)) {
            StepMetrics metrics;
            try {
                TrainStepResult res =
                    (cfg.algorithm == TrainAlgorithm::pc)
                        ? pc_train_step(spec, std::move(weights), batch, cfg, std::move(optim))
                        : bp_train_step(spec, std::move(weights), batch, cfg, std::move(optim));
                weights = std::move(res.weights);
                optim = std::move(res.optim);
                metrics = res.metrics;
            } catch (const DivergenceError&) {
                out.diverged = true;
            } catch (const OverflowError&) {
                out.diverged = true;
            }
            if (out.diverged) {
                if (csv)
                    csv->row({cell(step), "train", "inf", "inf", cell(0.0), "inf",
                              cell(detail::ms_since(t0))});
                break;
            }
            out.min_train_loss = std::min(out.min_train_loss, metrics.loss);
            if (csv && step % cfg.eval_period == 0)
                csv->row({cell(step), "train", cell(metrics.loss), cell(metrics.post_energy),
                          cell(0.0), cell(metrics.grad_norm), cell(detail::ms_since(t0))});
            if (step % cfg.eval_period == 0 && classification) {
                const EvalResult ev = evaluate(spec, weights, data.test.inputs, data.test.targets);
                out.best_test_accuracy = std::max(out.best_test_accuracy, ev.accuracy);
                if (csv)
                    csv->row({cell(step), "test", cell(ev.loss), cell(0.0), cell(ev.accuracy),
                              cell(0.0), cell(detail::ms_since(t0))});
            }
            ++step;
        }
    }

    const EvalResult ev = evaluate(spec, weights, data.test.inputs, data.test.targets);
    out.final_test_loss = ev.loss;
    out.final_test_accuracy = ev.accuracy;
    out.best_test_accuracy = std::max(out.best_test_accuracy, ev.accuracy);
    if (csv)
        csv->row({cell(step), "test", cell(ev.loss), cell(0.0), cell(ev.accuracy), cell(0.0),
                  cell(detail::ms_since(t0))});
    out.weights = std::move(weights);
    return out;
}

inline TrainConfig train_config_from(const KeyValueConfig& cfg, std::uint64_t seed) {
    TrainConfig tc;
    const std::string algo = cfg.get_string("algorithm", "pc");
    if (algo == "pc")
        tc.algorithm = TrainAlgorithm::pc;
    else if (algo == "bp")
        tc.algorithm = TrainAlgorithm::bp;
    else
        throw Error("unknown algorithm '" + algo + "' (expected pc|bp)");
    tc.epochs = static_cast<std::size_t>(cfg.get_int("epochs", 1));
    tc.batch_size = static_cast<std::size_t>(cfg.get_int("batch_size", 64));
    tc.eta = cfg.get_double("eta", 1e-3);
    tc.inference = detail::inference_from_config(cfg);
    tc.analytic_inference = cfg.get_int("analytic_inference", 0) != 0;
    tc.eval_period = static_cast<std::size_t>(cfg.get_int("eval_period", 100));
    tc.seed = seed;
    return tc;
}

inline OptimState optim_from_config(const KeyValueConfig& cfg, double eta) {
    const std::string name = cfg.get_string("optimizer", "adam");
    if (name == "sgd") return make_sgd(eta);
    if (name == "adam") return make_adam(eta);
    throw Error("unknown optimizer '" + name + "' (expected sgd|adam)");
}

inline TrainRunResult run_train(const ExperimentContext& ctx) {
    const auto t0 = detail::now();
    const NetworkSpec spec = spec_from_config(ctx.config);
    Rng rng(ctx.seed);
    detail::TrainData data = detail::dataset_from_config(ctx.config, rng);
    detail::maybe_standardize(ctx.config, data);
    const TrainConfig tc = train_config_from(ctx.config, ctx.seed);
    InitOptions init;
    if (ctx.config.has("origin_scale")) init.origin_scale = ctx.config.get_double("origin_scale");
    init.kaiming_uniform = ctx.config.get_int("kaiming_uniform", 0) != 0;
    Weights w = init_weights(spec, rng, init);

    const bool classification = data.train.targets.cols() > 1;
    CsvWriter csv((ctx.out_dir / "metrics.csv").string(),
                  {"step", "split", "loss", "energy", "accuracy", "grad_norm", "wallclock_ms"});
    TrainRunResult res = train_loop(spec, std::move(w), data, tc,
                                    optim_from_config(ctx.config, tc.eta), &csv, classification);
    write_weights((ctx.out_dir / "final_weights.txt").string(), res.weights);
    detail::write_manifest(ctx, "train", detail::ms_since(t0),
                           {"metrics.csv", "final_weights.txt"});
    return res;
}

// ---------------------------------------------------------------------------
// cmd_energy_check
// ---------------------------------------------------------------------------

/// Trains a DLN while logging the numerical equilibrated energy against the
/// closed form; the gap column is the relative deviation.
inline double run_energy_check(const ExperimentContext& ctx) {
    const auto t0 = detail::now();
    const NetworkSpec spec = spec_from_config(ctx.config);
    if (!spec.is_linear()) throw Error("energy_check: linear spec required");
    Rng rng(ctx.seed);

    const std::size_t steps = static_cast<std::size_t>(ctx.config.get_int("steps", 50));
    const std::size_t batch_size = static_cast<std::size_t>(ctx.config.get_int("batch_size", 16));
    const double eta = ctx.config.get_double("eta", 1e-2);
    const bool analytic = ctx.config.get_int("analytic_inference", 1) != 0;
    const InferenceConfig inf = detail::inference_from_config(ctx.config);

    Weights w = init_weights(spec, rng);
    Rng data_rng = rng.derive(5);
    OptimState optim = make_sgd(eta);

    CsvWriter csv((ctx.out_dir / "energy_check.csv").string(),
                  {"step", "energy_numerical", "energy_theory", "rel_gap"});
    double max_gap = 0.0;
    for (std::size_t t = 0; t < steps; ++t) {
        Batch b;
        b.x = data_rng.normal_matrix(batch_size, spec.input_dim());
        b.y = data_rng.normal_matrix(batch_size, spec.output_dim());

        const double theory = equilibrated_energy(spec, w, b);
        Activities z;
        if (analytic) {
            z = analytic_dln_inference(spec, w, b);
        } else {
            z = run_inference(spec, w, forward(spec, w, b.x).activities, b, inf).activities;
        }
        const double numerical = energy(spec, w, z, b).total;
        const double gap = std::abs(numerical - theory) / std::max(theory, 1e-300);
        max_gap = std::max(max_gap, gap);
        csv.row({cell(t), cell(numerical), cell(theory), cell(gap)});

        const auto grads = weight_gradient(spec, w, z, b);
        auto [w2, o2] = optim_step(std::move(w), grads, std::move(optim));
        w = std::move(w2);
        optim = std::move(o2);
    }
    detail::write_manifest(ctx, "energy_check", detail::ms_since(t0), {"energy_check.csv"});
    return max_gap;
}

// ---------------------------------------------------------------------------
// cmd_saddle_escape
// ---------------------------------------------------------------------------

struct ChainEscapeSummary {
    std::uint64_t seed = 0;
    std::size_t pc_steps = 0;  // steps to reach the loss threshold (0 = never)
    std::size_t bp_steps = 0;
};

/// Linear chain race: PC vs BP with identical data, init and learning rate.
inline std::vector<ChainEscapeSummary> run_saddle_escape_chain(
    const ExperimentContext& ctx, CsvWriter* trace_csv, CsvWriter* summary_csv) {
    const std::size_t hidden = static_cast<std::size_t>(ctx.config.get_int("hidden", 5));
    const double sigma = ctx.config.get_double("sigma", 5e-2);
    const double eta = ctx.config.get_double("eta", 0.4);
    const double threshold = ctx.config.get_double("loss_threshold", 0.01);
    const std::size_t max_steps = static_cast<std::size_t>(ctx.config.get_int("max_steps", 20000));
    const std::size_t n_seeds = static_cast<std::size_t>(ctx.config.get_int("seeds", 3));
    const std::size_t batch_size = static_cast<std::size_t>(ctx.config.get_int("batch_size", 64));
    const InferenceConfig inf = detail::inference_from_config(ctx.config);

    const auto spec = make_fc_spec(uniform_widths(hidden, 1), Activation::linear);
    std::vector<ChainEscapeSummary> summaries;

    for (std::uint64_t s = 0; s < n_seeds; ++s) {
        ChainEscapeSummary summary;
        summary.seed = ctx.seed + s;
        for (const bool use_pc : {true, false}) {
            Rng rng(summary.seed);
            InitOptions init;
            init.origin_scale = sigma;
            Weights w = init_weights(spec, rng, init);
            Rng data_rng = rng.derive(11);
            const Dataset data = toy_regression(batch_size * 4, data_rng);
            Rng shuffle_rng = rng.derive(13);
            OptimState optim = make_sgd(eta);
            TrainConfig tc;
            tc.algorithm = use_pc ? TrainAlgorithm::pc : TrainAlgorithm::bp;
            tc.inference = inf;

            std::size_t reached = 0;
            std::size_t step = 0;
            while (step < max_steps && reached == 0) {
                for (const Batch& b : batches(data, batch_size, shuffle_rng)) {
                    TrainStepResult res =
                        use_pc ? pc_train_step(spec, std::move(w), b, tc, std::move(optim))
                               : bp_train_step(spec, std::move(w), b, tc, std::move(optim));
                    w = std::move(res.weights);
                    optim = std::move(res.optim);
                    if (trace_csv && step % 25 == 0)
                        trace_csv->row({use_pc ? "pc" : "bp", cell(summary.seed), cell(step),
                                        cell(res.metrics.loss), cell(res.metrics.grad_norm)});
                    ++step;
                    if (res.metrics.loss < threshold) {
                        reached = step;
                        break;
                    }
                    if (step >= max_steps) break;
                }
            }
            (use_pc ? summary.pc_steps : summary.bp_steps) = reached;
            if (summary_csv)
                summary_csv->row({use_pc ? "pc" : "bp", cell(summary.seed), cell(reached)});
        }
        summaries.push_back(summary);
    }
    return summaries;
}

struct CompletionEscapeResult {
    std::size_t plateau_count = 0;
    std::size_t saddles_tested = 0;
    std::size_t saddles_escaped = 0;  // within the PC step budget
};

/// Matrix-completion run: BP from small init traverses a sequence of loss
/// plateaus; PC is restarted at each detected plateau and must escape within
/// the step budget (loss dropping 10% below the plateau level).
inline CompletionEscapeResult run_saddle_escape_completion(const ExperimentContext& ctx,
                                                           CsvWriter* trace_csv,
                                                           CsvWriter* summary_csv) {
    const std::size_t width = static_cast<std::size_t>(ctx.config.get_int("width", 32));
    const std::size_t hidden = static_cast<std::size_t>(ctx.config.get_int("hidden", 3));
    const double sigma = ctx.config.get_double("sigma", 5e-3);
    const double eta = ctx.config.get_double("eta", 1e-2);
    const std::size_t max_steps =
        static_cast<std::size_t>(ctx.config.get_int("max_steps", 200000));
    const std::size_t plateau_len = static_cast<std::size_t>(ctx.config.get_int("plateau_len", 50));
    const double plateau_tol = ctx.config.get_double("plateau_tol", 1e-4);
    const std::size_t pc_budget = static_cast<std::size_t>(ctx.config.get_int("pc_budget", 200));
    InferenceConfig inf = detail::inference_from_config(ctx.config);

    Rng rng(ctx.seed);
    const MatrixCompletionTask task = matrix_completion_task(rng);
    const Batch batch = matrix_completion_batch(task);

    std::vector<std::size_t> ws(hidden + 2, width);
    ws.front() = 10;
    ws.back() = 10;
    const auto spec = make_fc_spec(ws, Activation::linear);
    InitOptions init;
    init.origin_scale = sigma;
    Weights w = init_weights(spec, rng, init);

    // Full-batch BP descent with plateau bookkeeping.
    CompletionEscapeResult out;
    std::vector<std::pair<double, Weights>> plateaus;  // plateau loss + snapshot
    OptimState optim = make_sgd(eta);
    double prev_loss = std::numeric_limits<double>::infinity();
    std::size_t run_len = 0;
    bool counted = false;
    double final_loss = 0.0;
    for (std::size_t t = 0; t < max_steps; ++t) {
        TrainStepResult res = bp_train_step(spec, std::move(w), batch, {}, std::move(optim));
        w = std::move(res.weights);
        optim = std::move(res.optim);
        const double loss = res.metrics.loss;
        if (trace_csv && t % 50 == 0)
            trace_csv->row({"bp", cell(ctx.seed), cell(t), cell(loss), cell(res.metrics.grad_norm)});
        if (std::abs(loss - prev_loss) < plateau_tol) {
            ++run_len;
            if (run_len == plateau_len && !counted) {
                ++out.plateau_count;
                counted = true;
                plateaus.emplace_back(loss, w);
            }
        } else {
            run_len = 0;
            counted = false;
        }
        prev_loss = loss;
        final_loss = loss;
        if (loss < 1e-6) break;
    }

    // PC restarts at every visited saddle: a plateau counts as a saddle once
    // the BP trace later drops clearly below its level.
    TrainConfig pc_cfg;
    pc_cfg.algorithm = TrainAlgorithm::pc;
    pc_cfg.inference = inf;
    for (std::size_t k = 0; k < plateaus.size(); ++k) {
        const auto& [plateau_loss, snapshot] = plateaus[k];
        if (final_loss >= 0.9 * plateau_loss) continue;  // never escaped by BP
        ++out.saddles_tested;
        Weights pw = snapshot;
        OptimState po = make_sgd(eta);
        std::size_t escaped_at = 0;  // 0 = not escaped within the budget
        for (std::size_t t = 0; t < pc_budget && escaped_at == 0; ++t) {
            TrainStepResult res = pc_train_step(spec, std::move(pw), batch, pc_cfg, std::move(po));
            pw = std::move(res.weights);
            po = std::move(res.optim);
            if (trace_csv && t % 10 == 0)
                trace_csv->row({"pc_saddle" + std::to_string(k), cell(ctx.seed), cell(t),
                                cell(res.metrics.loss), cell(res.metrics.grad_norm)});
            if (res.metrics.loss < 0.9 * plateau_loss) escaped_at = t + 1;
        }
        if (escaped_at > 0) ++out.saddles_escaped;
        if (summary_csv)
            summary_csv->row({"pc_saddle" + std::to_string(k), cell(ctx.seed), cell(escaped_at)});
    }
    if (summary_csv) summary_csv->row({"bp_plateaus", cell(ctx.seed), cell(out.plateau_count)});
    return out;
}

inline void run_saddle_escape(const ExperimentContext& ctx) {
    const auto t0 = detail::now();
    const std::string mode = ctx.config.get_string("mode", "chain");
    CsvWriter trace((ctx.out_dir / "saddle_trace.csv").string(),
                    {"algorithm", "seed", "step", "loss", "grad_norm"});
    CsvWriter summary((ctx.out_dir / "saddle_summary.csv").string(),
                      {"algorithm", "seed", "steps_to_threshold"});
    if (mode == "chain") {
        run_saddle_escape_chain(ctx, &trace, &summary);
    } else if (mode == "matrix_completion") {
        run_saddle_escape_completion(ctx, &trace, &summary);
    } else {
        throw Error("unknown mode '" + mode + "' (expected chain|matrix_completion)");
    }
    detail::write_manifest(ctx, "saddle_escape", detail::ms_since(t0),
                           {"saddle_trace.csv", "saddle_summary.csv"});
}

// ---------------------------------------------------------------------------
// cmd_cond_scan
// ---------------------------------------------------------------------------

struct CondScanRow {
    std::size_t width = 0;
    std::size_t depth = 0;
    std::string parameterisation;
    std::string variant;
    std::uint64_t seed = 0;
    ConditionReport report;
};

inline std::vector<CondScanRow> cond_scan(const std::vector<std::size_t>& widths,
                                          const std::vector<std::size_t>& depths,
                                          const std::vector<Parameterisation>& params,
                                          const std::vector<HessianVariant>& variants,
                                          std::size_t seeds, std::uint64_t base_seed,
                                          std::size_t workers = 2) {
    struct Cell {
        std::size_t n, h;
        Parameterisation p;
        HessianVariant v;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (const auto p : params)
        for (const auto v : variants)
            for (const std::size_t h : depths)
                for (const std::size_t n : widths)
                    for (std::uint64_t s = 0; s < seeds; ++s)
                        cells.push_back({n, h, p, v, base_seed + s});

    std::vector<CondScanRow> rows(cells.size());
    detail::parallel_cells(cells.size(), workers, [&](std::size_t i) {
        const Cell& c = cells[i];
        if (c.n * c.h > 8192) throw Error("cond_scan: N*H exceeds the 8192 memory guard");
        const auto spec = (c.v == HessianVariant::pc_resnet)
                              ? make_resnet_spec(uniform_widths(c.h, c.n), Activation::linear, c.p)
                              : make_fc_spec(uniform_widths(c.h, c.n), Activation::linear, c.p);
        Rng rng = Rng(c.seed).derive(i);
        const Weights w = init_weights(spec, rng);
        const Matrix hess = assemble_activity_hessian(spec, w, c.v);
        rows[i] = {c.n, c.h, to_string(c.p), to_string(c.v), c.seed, condition_number(hess)};
    });
    return rows;
}

inline void run_cond_scan(const ExperimentContext& ctx) {
    const auto t0 = detail::now();
    std::vector<std::size_t> widths, depths;
    for (long long v : ctx.config.get_ints("widths_grid")) widths.push_back(v);
    for (long long v : ctx.config.get_ints("depths_grid")) depths.push_back(v);
    std::vector<Parameterisation> params;
    for (const std::string& p : {std::string("sp"), std::string("mupc")})
        if (ctx.config.get_string("parameterisations", "sp").find(p) != std::string::npos)
            params.push_back(parameterisation_from_string(p));
    std::vector<HessianVariant> variants;
    const std::string vs = ctx.config.get_string("variants", "pc_fc");
    if (vs.find("pc_fc") != std::string::npos) variants.push_back(HessianVariant::pc_fc);
    if (vs.find("pc_resnet") != std::string::npos) variants.push_back(HessianVariant::pc_resnet);
    if (vs.find("ep") != std::string::npos) variants.push_back(HessianVariant::ep);
    const std::size_t seeds = static_cast<std::size_t>(ctx.config.get_int("seeds", 1));

    const auto rows = cond_scan(widths, depths, params, variants, seeds, ctx.seed);
    CsvWriter csv((ctx.out_dir / "cond_scan.csv").string(),
                  {"width", "depth", "parameterisation", "variant", "seed", "lambda_min",
                   "lambda_max", "kappa"});
    for (const auto& r : rows)
        csv.row({cell(r.width), cell(r.depth), r.parameterisation, r.variant, cell(r.seed),
                 cell(r.report.lambda_min), cell(r.report.lambda_max), cell(r.report.kappa)});
    detail::write_manifest(ctx, "cond_scan", detail::ms_since(t0), {"cond_scan.csv"});
}

// ---------------------------------------------------------------------------
// cmd_ratio_scan
// ---------------------------------------------------------------------------

struct RatioScanRow {
    std::size_t width = 0;
    std::size_t depth = 0;
    std::size_t step = 0;
    double loss = 0.0;
    double energy = 0.0;
    double ratio = 0.0;  // inf marks a perfect fit (undefined ratio)
};

inline std::vector<RatioScanRow> ratio_scan(const std::vector<std::size_t>& widths,
                                            const std::vector<std::size_t>& depths,
                                            std::size_t train_steps, double eta,
                                            std::uint64_t seed, std::size_t batch_size = 8,
                                            std::size_t io_dim = 10) {
    std::vector<RatioScanRow> rows;
    for (const std::size_t h : depths) {
        for (const std::size_t n : widths) {
            std::vector<std::size_t> ws(h + 2, n);
            ws.front() = io_dim;
            ws.back() = io_dim;
            const auto spec = make_resnet_spec(ws, Activation::linear, Parameterisation::mupc);
            Rng rng = Rng(seed).derive(h * 1000 + n);
            Weights w = init_weights(spec, rng);
            Batch b;
            b.x = rng.normal_matrix(batch_size, io_dim);
            b.y = rng.normal_matrix(batch_size, io_dim);
            OptimState optim = make_adam(eta);
            for (std::size_t t = 0; t <= train_steps; ++t) {
                RatioScanRow row;
                row.width = n;
                row.depth = h;
                row.step = t;
                row.loss = mse_loss_and_bp_gradient(spec, w, b).loss;
                row.energy = equilibrated_energy(spec, w, b);
                const auto ratio = loss_energy_ratio(spec, w, b);
                row.ratio = ratio.value_or(std::numeric_limits<double>::infinity());
                rows.push_back(row);
                if (t == train_steps) break;
                const auto grads = weight_gradient(spec, w, analytic_dln_inference(spec, w, b), b);
                auto [w2, o2] = optim_step(std::move(w), grads, std::move(optim));
                w = std::move(w2);
                optim = std::move(o2);
            }
        }
    }
    return rows;
}

inline void run_ratio_scan(const ExperimentContext& ctx) {
    const auto t0 = detail::now();
    std::vector<std::size_t> widths, depths;
    for (long long v : ctx.config.get_ints("widths_grid")) widths.push_back(v);
    for (long long v : ctx.config.get_ints("depths_grid")) depths.push_back(v);
    const std::size_t steps = static_cast<std::size_t>(ctx.config.get_int("train_steps", 0));
    const double eta = ctx.config.get_double("eta", 1e-2);
    const std::size_t batch = static_cast<std::size_t>(ctx.config.get_int("batch_size", 8));
    const std::size_t io_dim = static_cast<std::size_t>(ctx.config.get_int("io_dim", 10));

    const auto rows = ratio_scan(widths, depths, steps, eta, ctx.seed, batch, io_dim);
    CsvWriter csv((ctx.out_dir / "ratio_scan.csv").string(),
                  {"width", "depth", "step", "loss", "energy", "ratio"});
    for (const auto& r : rows)
        csv.row({cell(r.width), cell(r.depth), cell(r.step), cell(r.loss), cell(r.energy),
                 cell(r.ratio)});
    detail::write_manifest(ctx, "ratio_scan", detail::ms_since(t0), {"ratio_scan.csv"});
}

// ---------------------------------------------------------------------------
// cmd_transfer_grid
// ---------------------------------------------------------------------------

struct TransferCell {
    std::size_t sweep_value = 0;  // width or depth
    double eta = 0.0;
    double beta = 0.0;
    double min_loss = 0.0;
    bool argmin = false;
};

inline std::vector<TransferCell> transfer_grid(const ExperimentContext& ctx) {
    const std::string sweep = ctx.config.get_string("sweep", "depth");
    std::vector<std::size_t> sweep_values;
    for (long long v : ctx.config.get_ints("sweep_values")) sweep_values.push_back(v);
    const std::vector<double> etas = ctx.config.get_doubles("etas");
    const std::vector<double> betas = ctx.config.get_doubles("betas");
    const std::size_t fixed_width =
        static_cast<std::size_t>(ctx.config.get_int("width", 32));
    const std::size_t fixed_depth =
        static_cast<std::size_t>(ctx.config.get_int("hidden", 4));
    const std::size_t steps = static_cast<std::size_t>(ctx.config.get_int("train_steps", 40));
    const std::size_t batch_size = static_cast<std::size_t>(ctx.config.get_int("batch_size", 32));
    const Activation act = activation_from_string(ctx.config.get_string("activation", "tanh"));

    struct CellSpec {
        std::size_t sweep_value;
        double eta, beta;
    };
    std::vector<CellSpec> cells;
    for (const std::size_t sv : sweep_values)
        for (const double eta : etas)
            for (const double beta : betas) cells.push_back({sv, eta, beta});

    // Shared task across cells: a small prototype classification problem.
    Rng data_rng = Rng(ctx.seed).derive(909);
    const Dataset data = prototype_classification(
        static_cast<std::size_t>(ctx.config.get_int("train_size", 256)), data_rng,
        ctx.config.get_double("noise", 0.35),
        static_cast<std::size_t>(ctx.config.get_int("image_side", 8)));

    std::vector<TransferCell> out(cells.size());
    detail::parallel_cells(cells.size(), 2, [&](std::size_t i) {
        const CellSpec& c = cells[i];
        const std::size_t h = (sweep == "depth") ? c.sweep_value : fixed_depth;
        const std::size_t n = (sweep == "width") ? c.sweep_value : fixed_width;
        std::vector<std::size_t> ws(h + 2, n);
        ws.front() = data.inputs.cols();
        ws.back() = data.targets.cols();
        const auto spec = make_resnet_spec(ws, act, Parameterisation::mupc);

        TransferCell cell_out;
        cell_out.sweep_value = c.sweep_value;
        cell_out.eta = c.eta;
        cell_out.beta = c.beta;
        try {
            Rng rng = Rng(ctx.seed).derive(i);
            Weights w = init_weights(spec, rng);
            Rng shuffle_rng = rng.derive(3);
            TrainConfig tc;
            tc.algorithm = TrainAlgorithm::pc;
            tc.inference.step_size = c.beta;
            tc.inference.max_steps = h;  // as many steps as hidden layers
            tc.inference.grad_tol = 0.0;
            OptimState optim = make_adam(c.eta);
            double min_loss = std::numeric_limits<double>::infinity();
            std::size_t step = 0;
            while (step < steps) {
                for (const Batch& b : batches(data, batch_size, shuffle_rng)) {
                    TrainStepResult res =
                        pc_train_step(spec, std::move(w), b, tc, std::move(optim));
                    w = std::move(res.weights);
                    optim = std::move(res.optim);
                    min_loss = std::min(min_loss, res.metrics.loss);
                    if (++step >= steps) break;
                }
            }
            cell_out.min_loss = min_loss;
        } catch (const Error&) {
            cell_out.min_loss = std::numeric_limits<double>::infinity();  // diverged cell
        }
        out[i] = cell_out;
    });

    // Mark the argmin cell per sweep value; diverged (+inf) cells never win.
    for (const std::size_t sv : sweep_values) {
        std::size_t best = cells.size();
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (out[i].sweep_value != sv) continue;
            if (best == cells.size() || out[i].min_loss < out[best].min_loss) best = i;
        }
        if (best < cells.size() && std::isfinite(out[best].min_loss)) out[best].argmin = true;
    }
    return out;
}

inline void run_transfer_grid(const ExperimentContext& ctx) {
    const auto t0 = detail::now();
    const auto cells = transfer_grid(ctx);
    CsvWriter csv((ctx.out_dir / "transfer_grid.csv").string(),
                  {"sweep_value", "eta", "beta", "min_loss", "argmin"});
    for (const auto& c : cells)
        csv.row({cell(c.sweep_value), cell(c.eta), cell(c.beta), cell(c.min_loss),
                 cell(static_cast<int>(c.argmin))});
    detail::write_manifest(ctx, "transfer_grid", detail::ms_since(t0), {"transfer_grid.csv"});
}

// ---------------------------------------------------------------------------
// cmd_fwd_stability
// ---------------------------------------------------------------------------

struct FwdStabilityRow {
    std::string parameterisation;
    std::string activation;
    std::size_t depth = 0;
    std::size_t layer = 0;
    double norm = 0.0;  // mean ||z_l|| over batch and seeds
    double rms = 0.0;   // norm / sqrt(N_l)
};

inline std::vector<FwdStabilityRow> fwd_stability(
    const std::vector<std::string>& setups, const std::vector<std::size_t>& depths,
    std::size_t width, std::size_t seeds, std::uint64_t base_seed, std::size_t batch = 16) {
    std::vector<FwdStabilityRow> rows;
    for (const std::string& setup : setups) {
        // Setup tag: <parameterisation>_<fc|resnet>_<activation>.
        const auto p1 = setup.find('_');
        const auto p2 = setup.find('_', p1 + 1);
        if (p1 == std::string::npos || p2 == std::string::npos)
            throw Error("fwd_stability: setup tag must be <param>_<fc|resnet>_<activation>");
        const Parameterisation param = parameterisation_from_string(setup.substr(0, p1));
        const std::string arch = setup.substr(p1 + 1, p2 - p1 - 1);
        const Activation act = activation_from_string(setup.substr(p2 + 1));

        for (const std::size_t h : depths) {
            const auto spec = (arch == "resnet")
                                  ? make_resnet_spec(uniform_widths(h, width), act, param)
                                  : make_fc_spec(uniform_widths(h, width), act, param);
            // Slot 0 records the input norm for reference.
            std::vector<double> norm_acc(h + 1, 0.0);
            const auto mean_row_norm = [batch, width](const Matrix& m) {
                double acc = 0.0;
                for (std::size_t i = 0; i < batch; ++i) {
                    double sq = 0.0;
                    for (std::size_t j = 0; j < width; ++j) sq += m(i, j) * m(i, j);
                    acc += std::sqrt(sq);
                }
                return acc / static_cast<double>(batch);
            };
            for (std::uint64_t s = 0; s < seeds; ++s) {
                Rng rng(base_seed + s);
                const Weights w = init_weights(spec, rng);
                Rng data_rng = rng.derive(17);
                const Matrix x = data_rng.normal_matrix(batch, width);
                const ForwardResult f = forward(spec, w, x);
                norm_acc[0] += mean_row_norm(x);
                for (std::size_t l = 0; l < h; ++l)
                    norm_acc[l + 1] += mean_row_norm(f.activities.z[l]);
            }
            for (std::size_t l = 0; l <= h; ++l) {
                FwdStabilityRow row;
                row.parameterisation = to_string(param) + std::string("_") + arch;
                row.activation = to_string(act);
                row.depth = h;
                row.layer = l;  // 0 = input
                row.norm = norm_acc[l] / static_cast<double>(seeds);
                row.rms = row.norm / std::sqrt(static_cast<double>(width));
                rows.push_back(row);
            }
        }
    }
    return rows;
}

inline void run_fwd_stability(const ExperimentContext& ctx) {
    const auto t0 = detail::now();
    std::vector<std::string> setups;
    {
        std::string cur;
        for (char c : ctx.config.get_string("setups", "mupc_resnet_relu sp_fc_tanh")) {
            if (c == ' ' || c == ',') {
                if (!cur.empty()) setups.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!cur.empty()) setups.push_back(cur);
    }
    std::vector<std::size_t> depths;
    for (long long v : ctx.config.get_ints("depths_grid")) depths.push_back(v);
    const std::size_t width = static_cast<std::size_t>(ctx.config.get_int("width", 128));
    const std::size_t seeds = static_cast<std::size_t>(ctx.config.get_int("seeds", 3));

    const auto rows = fwd_stability(setups, depths, width, seeds, ctx.seed);
    CsvWriter csv((ctx.out_dir / "fwd_stability.csv").string(),
                  {"parameterisation", "activation", "depth", "layer", "norm", "rms"});
    for (const auto& r : rows)
        csv.row({r.parameterisation, r.activation, cell(r.depth), cell(r.layer), cell(r.norm),
                 cell(r.rms)});
    detail::write_manifest(ctx, "fwd_stability", detail::ms_since(t0), {"fwd_stability.csv"});
}

// ---------------------------------------------------------------------------
// cmd_cosine_1mlp
// ---------------------------------------------------------------------------

namespace detail {

/// Real roots of a polynomial with the given coefficients (highest degree
/// first) by sign-change bracketing inside the Cauchy bound plus bisection.
inline std::vector<double> real_poly_roots(const std::vector<double>& coeffs) {
    std::vector<double> c = coeffs;
    while (!c.empty() && c.front() == 0.0) c.erase(c.begin());
    if (c.size() < 2) return {};
    const double lead = c.front();
    for (double& v : c) v /= lead;

    double bound = 0.0;
    for (std::size_t i = 1; i < c.size(); ++i) bound = std::max(bound, std::abs(c[i]));
    bound += 1.0;

    const auto eval = [&c](double x) {
        double p = 0.0;
        for (double v : c) p = p * x + v;
        return p;
    };

    std::vector<double> roots;
    const std::size_t cells = 4096;
    double prev_x = -bound, prev_p = eval(prev_x);
    for (std::size_t k = 1; k <= cells; ++k) {
        const double x = -bound + 2.0 * bound * static_cast<double>(k) / cells;
        const double p = eval(x);
        if (prev_p == 0.0) roots.push_back(prev_x);
        if (prev_p * p < 0.0) {
            double lo = prev_x, hi = x, plo = prev_p;
            for (int it = 0; it < 200; ++it) {
                const double mid = 0.5 * (lo + hi);
                const double pm = eval(mid);
                if (pm == 0.0) {
                    lo = hi = mid;
                    break;
                }
                if (plo * pm < 0.0)
                    hi = mid;
                else {
                    lo = mid;
                    plo = pm;
                }
            }
            roots.push_back(0.5 * (lo + hi));
        }
        prev_x = x;
        prev_p = p;
    }
    if (prev_p == 0.0) roots.push_back(prev_x);
    return roots;
}

}  // namespace detail

struct CosineRow {
    std::size_t batch_index = 0;
    double cos_pc = 0.0;
    double cos_bp = 0.0;
    double cos_trn = 0.0;
    double distance = 0.0;
    bool skipped = false;  // iterate on the solution manifold; cosine undefined
};

/// Per-batch cosine similarity of the PC / BP / TRN update directions against
/// the direction to the nearest point of the 1MLP solution manifold
/// w2 w1 = m (least-squares slope of the batch).
inline std::optional<CosineRow> cosine_1mlp_step(double w1, double w2, const Batch& batch,
                                                 double trn_damping) {
    const std::size_t B = batch.size();
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        sxy += batch.x(i, 0) * batch.y(i, 0);
        sxx += batch.x(i, 0) * batch.x(i, 0);
    }
    const double m = sxy / sxx;

    // Nearest manifold point: minimise (m/u - w2)^2 + (u - w1)^2 over u,
    // whose stationary points solve u^4 - w1 u^3 + w2 m u - m^2 = 0.
    const std::vector<double> roots =
        detail::real_poly_roots({1.0, -w1, 0.0, w2 * m, -m * m});
    if (roots.empty()) return std::nullopt;
    double best_u = 0.0, best_d2 = std::numeric_limits<double>::infinity();
    for (const double u : roots) {
        if (u == 0.0) continue;
        const double d2 = (m / u - w2) * (m / u - w2) + (u - w1) * (u - w1);
        if (d2 < best_d2) {
            best_d2 = d2;
            best_u = u;
        }
    }
    if (!std::isfinite(best_d2)) return std::nullopt;

    CosineRow row;
    row.distance = std::sqrt(best_d2);
    if (row.distance < 1e-9) {
        row.skipped = true;
        return row;
    }
    const double opt1 = best_u - w1;
    const double opt2 = m / best_u - w2;

    const auto spec = make_fc_spec({1, 1, 1}, Activation::linear);
    Weights w;
    w.layers = {Matrix(1, 1, {w1}), Matrix(1, 1, {w2})};

    const auto cosine = [&](double d1, double d2) {
        const double dn = std::sqrt(d1 * d1 + d2 * d2);
        const double on = std::sqrt(opt1 * opt1 + opt2 * opt2);
        return (d1 * opt1 + d2 * opt2) / (dn * on);
    };

    // PC: weight gradient at the exact inference equilibrium.
    const Activities z = analytic_dln_inference(spec, w, batch);
    const auto pc_g = weight_gradient(spec, w, z, batch);
    row.cos_pc = cosine(-pc_g[0](0, 0), -pc_g[1](0, 0));

    // BP: loss gradient.
    const auto bp = mse_loss_and_bp_gradient(spec, w, batch);
    row.cos_bp = cosine(-bp.gradients[0](0, 0), -bp.gradients[1](0, 0));

    // TRN: damped Newton on the loss, Hessian by central differences.
    const Matrix hess = numerical_hessian(mse_loss_fn(spec, batch), {w1, w2});
    const Vector trn =
        trn_update({bp.gradients[0](0, 0), bp.gradients[1](0, 0)}, hess, 1.0 / trn_damping);
    row.cos_trn = cosine(trn[0], trn[1]);
    return row;
}

struct CosineSummary {
    double mean_cos_pc = 0.0;
    double mean_cos_bp = 0.0;
    double mean_cos_trn = 0.0;
    std::size_t rows = 0;
};

/// For each random initialisation, every algorithm follows its own SGD
/// trajectory over the same data batches; at each batch the cosine of its
/// update against the optimal direction is recorded.
inline CosineSummary run_cosine_1mlp(const ExperimentContext& ctx) {
    const auto t0 = detail::now();
    const std::size_t n_inits = static_cast<std::size_t>(ctx.config.get_int("inits", 10));
    const std::size_t n_batches = static_cast<std::size_t>(ctx.config.get_int("batches", 5));
    const std::size_t batch_size = static_cast<std::size_t>(ctx.config.get_int("batch_size", 64));
    const double eta = ctx.config.get_double("eta", 0.2);
    const double damping = ctx.config.get_double("trn_damping", 2.0);

    const auto spec = make_fc_spec({1, 1, 1}, Activation::linear);
    CsvWriter csv((ctx.out_dir / "cosine_1mlp.csv").string(),
                  {"algorithm", "init", "batch", "cosine", "distance", "skipped"});

    CosineSummary summary;
    double sum_pc = 0.0, sum_bp = 0.0, sum_trn = 0.0;
    std::size_t count_pc = 0, count_bp = 0, count_trn = 0;

    for (std::size_t init = 0; init < n_inits; ++init) {
        Rng rng = Rng(ctx.seed).derive(init);
        const double w1_0 = rng.uniform(-1.0, 1.0);
        const double w2_0 = rng.uniform(-1.0, 1.0);
        Rng data_rng = rng.derive(23);
        std::vector<Batch> bs;
        for (std::size_t bi = 0; bi < n_batches; ++bi) {
            const Dataset d = toy_regression(batch_size, data_rng);
            Batch b;
            b.x = d.inputs;
            b.y = d.targets;
            bs.push_back(std::move(b));
        }

        for (const std::string algo : {"pc", "bp", "trn"}) {
            double w1 = w1_0, w2 = w2_0;
            for (std::size_t bi = 0; bi < n_batches; ++bi) {
                const auto row = cosine_1mlp_step(w1, w2, bs[bi], damping);
                double cosine = 0.0;
                bool skipped = !row || row->skipped;
                if (!skipped) {
                    cosine = (algo == "pc") ? row->cos_pc
                                            : (algo == "bp" ? row->cos_bp : row->cos_trn);
                    if (algo == "pc") {
                        sum_pc += cosine;
                        ++count_pc;
                    } else if (algo == "bp") {
                        sum_bp += cosine;
                        ++count_bp;
                    } else {
                        sum_trn += cosine;
                        ++count_trn;
                    }
                }
                csv.row({algo, cell(init), cell(bi), cell(cosine),
                         cell(row ? row->distance : 0.0), cell(skipped ? 1 : 0)});

                // Advance this algorithm's own iterate.
                Weights w;
                w.layers = {Matrix(1, 1, {w1}), Matrix(1, 1, {w2})};
                if (algo == "pc") {
                    const Activities z = analytic_dln_inference(spec, w, bs[bi]);
                    const auto g = weight_gradient(spec, w, z, bs[bi]);
                    w1 -= eta * g[0](0, 0);
                    w2 -= eta * g[1](0, 0);
                } else if (algo == "bp") {
                    const auto lg = mse_loss_and_bp_gradient(spec, w, bs[bi]);
                    w1 -= eta * lg.gradients[0](0, 0);
                    w2 -= eta * lg.gradients[1](0, 0);
                } else {
                    const auto lg = mse_loss_and_bp_gradient(spec, w, bs[bi]);
                    const Matrix hess = numerical_hessian(mse_loss_fn(spec, bs[bi]), {w1, w2});
                    const Vector step =
                        trn_update({lg.gradients[0](0, 0), lg.gradients[1](0, 0)}, hess,
                                   1.0 / damping);
                    w1 += step[0];
                    w2 += step[1];
                }
            }
        }
    }
    if (count_pc) summary.mean_cos_pc = sum_pc / static_cast<double>(count_pc);
    if (count_bp) summary.mean_cos_bp = sum_bp / static_cast<double>(count_bp);
    if (count_trn) summary.mean_cos_trn = sum_trn / static_cast<double>(count_trn);
    summary.rows = count_pc + count_bp + count_trn;
    detail::write_manifest(ctx, "cosine_1mlp", detail::ms_since(t0), {"cosine_1mlp.csv"});
    return summary;
}

}  // namespace pcn
