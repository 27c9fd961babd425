// pcbench: experiment harness for the predictive-coding toolkit.
//
// Usage: pcbench <subcommand> --config <file> --out <dir> [--seed S]
// Configs are plain-text `key = value` files; every subcommand writes CSV
// outputs plus a manifest.json echoing the configuration.

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "pcn/experiments.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "key = value configuration file")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", args.out_dir, "output directory (created if missing)");
    cmd->add_option("--seed", args.seed, "override the config seed")
        ->each([&args](const std::string&) { args.seed_set = true; });
}

pcn::ExperimentContext make_context(const CommonArgs& args) {
    pcn::ExperimentContext ctx;
    ctx.config = pcn::KeyValueConfig::parse_file(args.config_path);
    ctx.out_dir = args.out_dir;
    std::filesystem::create_directories(ctx.out_dir);
    ctx.seed = args.seed_set ? args.seed
                             : static_cast<std::uint64_t>(ctx.config.get_int("seed", 0));
    return ctx;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pcbench: predictive-coding experiment harness"};
    app.require_subcommand(1);

    CommonArgs args;

    auto* train = app.add_subcommand(
        "train",
        "Train a PCN or BP baseline; writes metrics.csv "
        "(step,split,loss,energy,accuracy,grad_norm,wallclock_ms) and final_weights.txt");
    add_common(train, args);

    auto* energy_check = app.add_subcommand(
        "energy-check",
        "Compare the numerical equilibrated energy with the closed form during DLN "
        "training; writes energy_check.csv (step,energy_numerical,energy_theory,rel_gap)");
    add_common(energy_check, args);

    auto* saddle = app.add_subcommand(
        "saddle-escape",
        "Race PC against BP from saddle initialisations (mode = chain|matrix_completion); "
        "writes saddle_trace.csv (algorithm,seed,step,loss,grad_norm) and "
        "saddle_summary.csv (algorithm,seed,steps_to_threshold)");
    add_common(saddle, args);

    auto* cond = app.add_subcommand(
        "cond-scan",
        "Scan activity-Hessian conditioning over (width,depth,parameterisation,variant); "
        "writes cond_scan.csv (width,depth,parameterisation,variant,seed,lambda_min,"
        "lambda_max,kappa)");
    add_common(cond, args);

    auto* ratio = app.add_subcommand(
        "ratio-scan",
        "Loss / equilibrated-energy ratio for linear muPC ResNets over (width,depth,step); "
        "writes ratio_scan.csv (width,depth,step,loss,energy,ratio)");
    add_common(ratio, args);

    auto* transfer = app.add_subcommand(
        "transfer-grid",
        "Minimum training loss over an (eta,beta) grid across a width or depth sweep; "
        "writes transfer_grid.csv (sweep_value,eta,beta,min_loss,argmin); diverged cells "
        "record min_loss = inf and never win the argmin");
    add_common(transfer, args);

    auto* fwd = app.add_subcommand(
        "fwd-stability",
        "Forward-pass activity norms at initialisation per depth and parameterisation; "
        "writes fwd_stability.csv (parameterisation,activation,depth,layer,norm,rms)");
    add_common(fwd, args);

    auto* cosine = app.add_subcommand(
        "cosine-1mlp",
        "Cosine similarity of PC/BP/TRN updates against the optimal 1MLP direction; "
        "writes cosine_1mlp.csv (algorithm,init,batch,cosine,distance,skipped)");
    add_common(cosine, args);

    CLI11_PARSE(app, argc, argv);

    try {
        const pcn::ExperimentContext ctx = make_context(args);
        if (train->parsed()) {
            const pcn::TrainRunResult res = pcn::run_train(ctx);
            std::cout << "final_test_loss=" << res.final_test_loss
                      << " final_test_accuracy=" << res.final_test_accuracy
                      << (res.diverged ? " (diverged)" : "") << "\n";
        } else if (energy_check->parsed()) {
            std::cout << "max_rel_gap=" << pcn::run_energy_check(ctx) << "\n";
        } else if (saddle->parsed()) {
            pcn::run_saddle_escape(ctx);
        } else if (cond->parsed()) {
            pcn::run_cond_scan(ctx);
        } else if (ratio->parsed()) {
            pcn::run_ratio_scan(ctx);
        } else if (transfer->parsed()) {
            pcn::run_transfer_grid(ctx);
        } else if (fwd->parsed()) {
            pcn::run_fwd_stability(ctx);
        } else if (cosine->parsed()) {
            const pcn::CosineSummary s = pcn::run_cosine_1mlp(ctx);
            std::cout << "mean_cos_pc=" << s.mean_cos_pc << " mean_cos_bp=" << s.mean_cos_bp
                      << " mean_cos_trn=" << s.mean_cos_trn << "\n";
        }
    } catch (const pcn::Error& e) {
        std::cerr << "pcbench: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "pcbench: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
