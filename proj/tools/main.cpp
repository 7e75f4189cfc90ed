#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "ubridge/experiment.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    int threads = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Path to the JSON run configuration")
        ->required();
    cmd->add_option("--out", args.out_dir,
                    "Output directory (overrides the config and UBRIDGE_OUT)");
    cmd->add_option("--threads", args.threads, "Worker threads for kernel assembly "
                                               "and per-s solves")
        ->check(CLI::PositiveNumber);
}

std::filesystem::path resolve_out_dir(const CommonArgs& args,
                                      const ubridge::RunConfig& cfg) {
    if (!args.out_dir.empty()) return args.out_dir;
    if (const char* env = std::getenv("UBRIDGE_OUT"); env && *env) return env;
    return cfg.output_dir;
}

template <typename Command>
int dispatch(const CommonArgs& args, Command&& command) {
    ubridge::RunConfig cfg;
    try {
        cfg = ubridge::load_config(args.config_path);
    } catch (const ubridge::ConfigError& e) {
        std::cerr << R"({"error":{"exit_code":2,"kind":"config","message":")"
                  << e.what() << R"("}})" << "\n";
        return 2;
    }
    return command(cfg, resolve_out_dir(args, cfg), args.threads);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unbalanced Schroedinger bridge solver for diffusions with killing"};
    app.require_subcommand(1);

    CommonArgs solve_args, compare_args, simulate_args, oracle_args;

    CLI::App* solve = app.add_subcommand(
        "solve", "Solve the bridge for each s and emit the marginal flow, "
                 "survival, drift and killing tables");
    add_common(solve, solve_args);

    CLI::App* compare = app.add_subcommand(
        "compare", "Reweighted-baseline comparison and the consistent-marginal "
                   "dichotomy report");
    add_common(compare, compare_args);

    CLI::App* simulate = app.add_subcommand(
        "simulate", "Monte Carlo particle verification of the posterior process");
    add_common(simulate, simulate_args);

    CLI::App* oracle = app.add_subcommand(
        "oracle-check", "Static-coupling brute-force cross-check on a small grid");
    add_common(oracle, oracle_args);

    CLI11_PARSE(app, argc, argv);

    if (solve->parsed()) return dispatch(solve_args, ubridge::cmd_solve);
    if (compare->parsed()) return dispatch(compare_args, ubridge::cmd_compare);
    if (simulate->parsed()) return dispatch(simulate_args, ubridge::cmd_simulate);
    if (oracle->parsed()) return dispatch(oracle_args, ubridge::cmd_oracle_check);
    return 1;
}
