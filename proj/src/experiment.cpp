#include "ubridge/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <iostream>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "ubridge/baselines.hpp"
#include "ubridge/solver.hpp"
#include "ubridge/validation.hpp"

namespace ubridge {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string fmt17(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_s(double s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", s);
    return buf;
}

} // namespace

double two_lobe_density(double x) {
    if (x < 2.0 / 3.0) {
        return 0.3 - 0.3 * std::cos(3.0 * std::numbers::pi * x);
    }
    return 2.4 - 2.4 * std::cos(6.0 * std::numbers::pi * x - 4.0 * std::numbers::pi);
}

namespace {

FieldSpec parse_field(const nlohmann::json& j, const std::string& name) {
    FieldSpec f;
    if (j.is_number()) {
        f.type = "constant";
        f.value = j.get<double>();
        return f;
    }
    if (!j.is_object() || !j.contains("type")) {
        throw ConfigError(name + ": expected a number or an object with \"type\"");
    }
    f.type = j.at("type").get<std::string>();
    if (f.type == "zero") {
        return f;
    }
    if (f.type == "constant") {
        f.value = j.at("value").get<double>();
        return f;
    }
    if (f.type == "cosine") {
        f.base = j.at("base").get<double>();
        f.amplitude = j.at("amplitude").get<double>();
        f.cycles = j.value("cycles", 1.0);
        return f;
    }
    throw ConfigError(name + ": unknown field type \"" + f.type + "\"");
}

std::function<double(double, double)> field_to_function(const FieldSpec& f) {
    if (f.type == "zero") {
        return [](double, double) { return 0.0; };
    }
    if (f.type == "constant") {
        const double v = f.value;
        return [v](double, double) { return v; };
    }
    const double base = f.base, amp = f.amplitude, cyc = f.cycles;
    return [base, amp, cyc](double, double x) {
        return base + amp * std::cos(2.0 * std::numbers::pi * cyc * x);
    };
}

DensitySpec parse_density(const nlohmann::json& j, const std::string& name) {
    DensitySpec d;
    if (!j.is_object() || !j.contains("type")) {
        throw ConfigError(name + ": expected an object with \"type\"");
    }
    d.type = j.at("type").get<std::string>();
    if (d.type == "two_lobe" || d.type == "two_lobe_reflected") {
        return d;
    }
    if (d.type == "table") {
        d.values = j.at("values").get<std::vector<double>>();
        return d;
    }
    throw ConfigError(name + ": unknown density type \"" + d.type + "\"");
}

ordered_json field_to_json(const FieldSpec& f) {
    ordered_json j;
    j["type"] = f.type;
    if (f.type == "constant") j["value"] = f.value;
    if (f.type == "cosine") {
        j["base"] = f.base;
        j["amplitude"] = f.amplitude;
        j["cycles"] = f.cycles;
    }
    return j;
}

ordered_json density_to_json(const DensitySpec& d) {
    ordered_json j;
    j["type"] = d.type;
    if (d.type == "table") j["values"] = d.values;
    return j;
}

} // namespace

std::string RunConfig::to_json_string() const {
    ordered_json j;
    j["domain"] = {{"lo", domain_lo}, {"hi", domain_hi}};
    j["n_cells"] = n_cells;
    j["n_steps"] = n_steps;
    j["sigma"] = sigma;
    j["drift"] = field_to_json(drift);
    j["killing"] = field_to_json(killing);
    j["rho0"] = density_to_json(rho0);
    j["rho1"] = density_to_json(rho1);
    j["s_list"] = s_list;
    j["tolerances"] = {{"solver_tol", solver_tol},
                       {"tol_mass", tol_mass},
                       {"max_iter", max_iter}};
    if (mc) {
        j["mc"] = {{"n_particles", mc->n_particles}, {"seed", mc->seed}};
    }
    j["output_dir"] = output_dir;
    return j.dump(2);
}

RunConfig parse_config(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    try {
        RunConfig cfg;
        if (j.contains("domain")) {
            cfg.domain_lo = j["domain"].value("lo", 0.0);
            cfg.domain_hi = j["domain"].value("hi", 1.0);
        }
        cfg.n_cells = j.value("n_cells", cfg.n_cells);
        cfg.n_steps = j.value("n_steps", cfg.n_steps);
        cfg.sigma = j.value("sigma", cfg.sigma);
        if (j.contains("drift")) cfg.drift = parse_field(j["drift"], "drift");
        if (j.contains("killing")) cfg.killing = parse_field(j["killing"], "killing");
        if (j.contains("rho0")) cfg.rho0 = parse_density(j["rho0"], "rho0");
        if (j.contains("rho1")) cfg.rho1 = parse_density(j["rho1"], "rho1");
        if (j.contains("s_list")) cfg.s_list = j["s_list"].get<std::vector<double>>();
        if (j.contains("tolerances")) {
            const auto& t = j["tolerances"];
            cfg.solver_tol = t.value("solver_tol", cfg.solver_tol);
            cfg.tol_mass = t.value("tol_mass", cfg.tol_mass);
            cfg.max_iter = t.value("max_iter", cfg.max_iter);
        }
        if (j.contains("mc")) {
            McConfig mc;
            mc.n_particles = j["mc"].value("n_particles", mc.n_particles);
            mc.seed = j["mc"].value("seed", mc.seed);
            cfg.mc = mc;
        }
        cfg.output_dir = j.value("output_dir", cfg.output_dir);

        // Validation.
        if (!(cfg.domain_hi > cfg.domain_lo)) {
            throw ConfigError("config: domain.hi must exceed domain.lo");
        }
        if (cfg.s_list.empty()) throw ConfigError("config: s_list must be nonempty");
        for (double s : cfg.s_list) {
            if (!(s > 0.0 && s <= 1.0)) {
                throw ConfigError("config: every s must lie in (0, 1]");
            }
        }
        const bool builtin = cfg.rho0.type != "table" || cfg.rho1.type != "table";
        if (builtin) {
            if (cfg.n_cells < 16) {
                throw ConfigError("config: n_cells must be >= 16 for the built-in "
                                  "density profiles");
            }
            if (cfg.domain_lo != 0.0 || cfg.domain_hi != 1.0) {
                throw ConfigError("config: built-in density profiles require the "
                                  "domain [0, 1]");
            }
        } else if (cfg.n_cells < 3) {
            throw ConfigError("config: n_cells must be >= 3");
        }
        if (cfg.n_steps < 1) throw ConfigError("config: n_steps must be >= 1");
        if (!(cfg.sigma > 0.0)) throw ConfigError("config: sigma must be positive");
        if (cfg.rho1.type == "table" && cfg.s_list.size() != 1) {
            throw ConfigError("config: a tabulated rho1 requires exactly one s");
        }
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config error: ") + e.what());
    }
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config: cannot open " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

ExperimentSetup make_setup(const RunConfig& cfg) {
    ExperimentSetup setup;
    setup.grid = SpaceGrid::uniform(cfg.domain_lo, cfg.domain_hi, cfg.n_cells);
    setup.tm = TimeMesh::uniform(cfg.n_steps);

    setup.spec.drift = field_to_function(cfg.drift);
    const double sigma = cfg.sigma;
    setup.spec.sigma = [sigma](double, double) { return sigma; };
    setup.spec.killing = field_to_function(cfg.killing);

    auto resolve = [&](const DensitySpec& d, bool reflected) {
        std::vector<double> v;
        if (d.type == "table") {
            if (static_cast<int>(d.values.size()) != cfg.n_cells) {
                throw ConfigError("config: density table length must equal n_cells");
            }
            v = d.values;
            for (double x : v) {
                if (x < 0.0) throw ConfigError("config: density table has negative entries");
            }
        } else {
            auto f = reflected
                         ? std::function<double(double)>(
                               [](double x) { return two_lobe_density(1.0 - x); })
                         : std::function<double(double)>(two_lobe_density);
            v = sample_density(f, setup.grid);
        }
        normalize_mass(v, setup.grid, 1.0);
        return v;
    };
    setup.rho0 = resolve(cfg.rho0, false);
    setup.rho1_unit = resolve(cfg.rho1, cfg.rho1.type == "two_lobe_reflected");
    return setup;
}

std::vector<double> ExperimentSetup::rho1_for(double s) const {
    std::vector<double> v = rho1_unit;
    for (double& x : v) x *= s;
    return v;
}

std::string file_checksum(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("file_checksum: cannot open " + path.string());
    }
    std::uint64_t hash = 14695981039346656037ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof buf);
        const std::streamsize got = in.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            hash ^= static_cast<unsigned char>(buf[i]);
            hash *= 1099511628211ULL;
        }
    }
    char out[24];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(hash));
    return out;
}

namespace {

/// Collects the files a command writes so that failures leave no partial
/// output, and assembles the manifest at the end.
class CommandOutput {
public:
    CommandOutput(std::string command, const RunConfig& cfg,
                  std::filesystem::path out_dir)
        : command_(std::move(command)), cfg_(cfg), dir_(std::move(out_dir)) {
        std::filesystem::create_directories(dir_);
    }

    std::filesystem::path path(const std::string& name) const { return dir_ / name; }

    std::ofstream open(const std::string& name) {
        written_.push_back(name);
        std::ofstream out(path(name), std::ios::binary);
        if (!out) {
            throw std::runtime_error("cannot open output file " + path(name).string());
        }
        return out;
    }

    void discard_all() {
        for (const auto& name : written_) {
            std::error_code ec;
            std::filesystem::remove(path(name), ec);
        }
        written_.clear();
    }

    void finalize(ordered_json summary) {
        ordered_json manifest;
        manifest["command"] = command_;
        manifest["config"] = ordered_json::parse(cfg_.to_json_string());
        manifest["summary"] = std::move(summary);
        std::vector<std::string> names = written_;
        std::sort(names.begin(), names.end());
        ordered_json files = ordered_json::array();
        for (const auto& name : names) {
            ordered_json entry;
            entry["name"] = name;
            entry["bytes"] = std::filesystem::file_size(path(name));
            entry["fnv1a64"] = file_checksum(path(name));
            files.push_back(entry);
        }
        manifest["files"] = std::move(files);
        std::ofstream out(path("manifest.json"), std::ios::binary);
        out << manifest.dump(2) << "\n";
    }

private:
    std::string command_;
    const RunConfig& cfg_;
    std::filesystem::path dir_;
    std::vector<std::string> written_;
};

void write_time_space_csv(std::ofstream& out, const char* value_header,
                          const SpaceGrid& g, const TimeMesh& tm,
                          const TimeField& field) {
    out << "t,x," << value_header << "\n";
    for (int k = 0; k <= tm.n_steps; ++k) {
        const std::string t = fmt17(tm.t(k));
        for (int i = 0; i < g.n_cells; ++i) {
            out << t << ',' << fmt17(g.center(i)) << ',' << fmt17(field(k, i))
                << "\n";
        }
    }
}

void write_survival_csv(std::ofstream& out, const SpaceGrid& g, const TimeMesh& tm,
                        const TimeField& flow, std::span<const double> coffin) {
    out << "t,surviving_mass,coffin_mass\n";
    for (int k = 0; k <= tm.n_steps; ++k) {
        const double surviving = g.h * accurate_sum(flow.row(k));
        out << fmt17(tm.t(k)) << ',' << fmt17(surviving) << ','
            << fmt17(coffin.empty() ? 0.0 : coffin[static_cast<std::size_t>(k)])
            << "\n";
    }
}

int report_error(const std::string& command, int code, const std::string& kind,
                 const std::string& message, CommandOutput* output) {
    if (output) output->discard_all();
    ordered_json record;
    record["error"] = {{"command", command},
                       {"exit_code", code},
                       {"kind", kind},
                       {"message", message}};
    std::cerr << record.dump() << "\n";
    return code;
}

template <typename Body>
int run_command(const std::string& command, const RunConfig& cfg,
                const std::filesystem::path& out_dir, Body&& body) {
    CommandOutput output(command, cfg, out_dir);
    try {
        body(output);
        return 0;
    } catch (const ConfigError& e) {
        return report_error(command, 2, "config", e.what(), &output);
    } catch (const ConvergenceError& e) {
        return report_error(command, 3, "convergence", e.what(), &output);
    } catch (const ValidationError& e) {
        return report_error(command, 4, "validation", e.what(), &output);
    } catch (const std::exception& e) {
        return report_error(command, 1, "internal", e.what(), &output);
    }
}

struct SolvedInstance {
    double s = 0.0;
    ProblemInstance inst;
    BridgeSolution sol;
    CostReport cost;
};

SolvedInstance solve_one(const ExperimentSetup& setup, const KernelBundle& bundle,
                         const RunConfig& cfg, double s) {
    SolvedInstance out;
    out.s = s;
    out.inst = ProblemInstance::make(setup.grid, setup.rho0, setup.rho1_for(s));
    SolveOptions opts;
    opts.tol = cfg.solver_tol;
    opts.max_iter = cfg.max_iter;
    out.sol = solve(out.inst, bundle, opts);
    assemble_posterior(setup.spec, bundle, out.sol);
    out.cost = evaluate_cost(out.sol, setup.spec, bundle);
    return out;
}

std::vector<SolvedInstance> solve_all(const ExperimentSetup& setup,
                                      const KernelBundle& bundle,
                                      const RunConfig& cfg, int n_threads) {
    std::vector<SolvedInstance> results(cfg.s_list.size());
    if (n_threads <= 1 || cfg.s_list.size() == 1) {
        for (std::size_t i = 0; i < cfg.s_list.size(); ++i) {
            results[i] = solve_one(setup, bundle, cfg, cfg.s_list[i]);
        }
        return results;
    }
    std::vector<std::future<SolvedInstance>> futures;
    futures.reserve(cfg.s_list.size());
    for (double s : cfg.s_list) {
        futures.push_back(std::async(std::launch::async, [&, s] {
            return solve_one(setup, bundle, cfg, s);
        }));
    }
    for (std::size_t i = 0; i < futures.size(); ++i) results[i] = futures[i].get();
    return results;
}

ordered_json summarize(const SolvedInstance& si, const SpaceGrid& g,
                       const TimeMesh& tm) {
    ordered_json j;
    j["s"] = si.s;
    j["iterations"] = si.sol.iterations;
    j["final_hilbert_distance"] = si.sol.hilbert_report.distances.empty()
                                      ? 0.0
                                      : si.sol.hilbert_report.distances.back();
    j["fitted_contraction_ratio"] = si.sol.hilbert_report.fitted_ratio();
    j["terminal_surviving_mass"] = g.h * accurate_sum(si.sol.marginal_P.row(tm.n_steps));
    j["terminal_coffin_mass"] =
        si.sol.coffin_mass[static_cast<std::size_t>(tm.n_steps)];
    j["cost"] = {{"kinetic", si.cost.kinetic},
                 {"killing_entropy", si.cost.killing_entropy},
                 {"total", si.cost.total}};
    return j;
}

int largest_bin_divisor(int n_cells, int cap = 64) {
    for (int b = std::min(n_cells, cap); b >= 1; --b) {
        if (n_cells % b == 0) return b;
    }
    return 1;
}

} // namespace

int cmd_solve(const RunConfig& cfg, const std::filesystem::path& out_dir,
              int n_threads) {
    return run_command("solve", cfg, out_dir, [&](CommandOutput& output) {
        ExperimentSetup setup = make_setup(cfg);
        BundleOptions bopts;
        bopts.tol_mass = cfg.tol_mass;
        bopts.n_threads = n_threads;
        const KernelBundle bundle =
            build_kernel_bundle(setup.spec, setup.grid, setup.tm, bopts);

        const std::vector<SolvedInstance> results =
            solve_all(setup, bundle, cfg, n_threads);

        ordered_json per_s = ordered_json::array();
        for (const auto& si : results) {
            const std::string tag = fmt_s(si.s);
            {
                auto f = output.open("marginal_flow_s" + tag + ".csv");
                write_time_space_csv(f, "P", setup.grid, bundle.tm, si.sol.marginal_P);
            }
            {
                auto f = output.open("survival_s" + tag + ".csv");
                write_survival_csv(f, setup.grid, bundle.tm, si.sol.marginal_P,
                                   si.sol.coffin_mass);
            }
            {
                auto f = output.open("drift_s" + tag + ".csv");
                write_time_space_csv(f, "drift", setup.grid, bundle.tm,
                                     si.sol.drift_correction);
            }
            {
                auto f = output.open("killing_s" + tag + ".csv");
                write_time_space_csv(f, "killing", setup.grid, bundle.tm,
                                     si.sol.posterior_killing);
            }
            per_s.push_back(summarize(si, setup.grid, bundle.tm));
        }
        ordered_json summary;
        summary["per_s"] = std::move(per_s);
        summary["kernel"] = {{"effective_n_steps", bundle.tm.n_steps},
                             {"dt_refinements", bundle.refinements},
                             {"max_row_defect", bundle.max_row_defect}};
        output.finalize(std::move(summary));
    });
}

int cmd_compare(const RunConfig& cfg, const std::filesystem::path& out_dir,
                int n_threads) {
    return run_command("compare", cfg, out_dir, [&](CommandOutput& output) {
        ExperimentSetup setup = make_setup(cfg);
        BundleOptions bopts;
        bopts.tol_mass = cfg.tol_mass;
        bopts.n_threads = n_threads;
        const KernelBundle bundle =
            build_kernel_bundle(setup.spec, setup.grid, setup.tm, bopts);
        const int nt = bundle.tm.n_nodes();
        const int n = setup.grid.n_cells;

        // The s-independence assertion compares independently converged
        // solves, so the baseline runs use a tighter internal tolerance.
        const double tol = std::min(cfg.solver_tol, 1e-11);

        std::vector<ReweightedBridge> flows;
        flows.reserve(cfg.s_list.size());
        for (double s : cfg.s_list) {
            flows.push_back(
                solve_reweighted(setup.rho0, setup.rho1_for(s), bundle, tol));
        }
        double max_dev = 0.0;
        for (std::size_t a = 0; a + 1 < flows.size(); ++a) {
            for (std::size_t b = a + 1; b < flows.size(); ++b) {
                for (int k = 0; k < nt; ++k) {
                    for (int i = 0; i < n; ++i) {
                        max_dev = std::max(max_dev, std::abs(flows[a].flow(k, i) -
                                                             flows[b].flow(k, i)));
                    }
                }
            }
        }
        if (flows.size() > 1 && max_dev >= 1e-8) {
            throw ValidationError(
                "compare: reweighted flow varies across s (max deviation " +
                fmt17(max_dev) + ")");
        }
        {
            auto f = output.open("reweighted_flow.csv");
            write_time_space_csv(f, "P", setup.grid, bundle.tm, flows.front().flow);
        }

        // Dichotomy on the consistent-marginal instance: the target is the
        // prior's own surviving pushforward.
        std::vector<double> rho1_cm = bundle.kernel_transpose_apply(setup.rho0);
        const ForwardSweep prior = propagate_forward(bundle, setup.rho0);

        ProblemInstance cm = ProblemInstance::make(setup.grid, setup.rho0, rho1_cm);
        SolveOptions opts;
        opts.tol = tol;
        opts.max_iter = std::max(cfg.max_iter, 100000);
        BridgeSolution usbp = solve(cm, bundle, opts);
        assemble_posterior(setup.spec, bundle, usbp);

        double usbp_flow_dev = 0.0, usbp_drift_dev = 0.0, usbp_alpha_dev = 0.0;
        for (int k = 0; k < nt; ++k) {
            for (int i = 0; i < n; ++i) {
                usbp_flow_dev = std::max(
                    usbp_flow_dev, std::abs(usbp.marginal_P(k, i) - prior.phihat(k, i)));
                if (usbp.marginal_P(k, i) > 0.0) {
                    usbp_drift_dev = std::max(usbp_drift_dev,
                                              std::abs(usbp.drift_correction(k, i)));
                    const double phi = usbp.potentials.phi(k, i);
                    usbp_alpha_dev = std::max(
                        usbp_alpha_dev, std::abs(usbp.potentials.psi / phi - 1.0));
                }
            }
        }

        ReweightedBridge rw = solve_reweighted(setup.rho0, rho1_cm, bundle, tol);
        double rw_flow_dev = 0.0, rw_drift_dev = 0.0;
        for (int k = 0; k < nt; ++k) {
            const double t = bundle.tm.t(k);
            for (int i = 0; i < n; ++i) {
                rw_flow_dev = std::max(rw_flow_dev,
                                       std::abs(rw.flow(k, i) - prior.phihat(k, i)));
                if (rw.flow(k, i) > 0.0 && rw.phi(k, i) > 0.0) {
                    const int il = i > 0 ? i - 1 : i;
                    const int ir = i + 1 < n ? i + 1 : i;
                    const double dlog =
                        (std::log(rw.phi(k, ir)) - std::log(rw.phi(k, il))) /
                        ((ir - il) * setup.grid.h);
                    const double a = setup.spec.a(t, setup.grid.center(i));
                    rw_drift_dev = std::max(rw_drift_dev, std::abs(a * dlog));
                }
            }
        }

        ordered_json dichotomy;
        dichotomy["construction"] = {
            {"rho1", "prior surviving pushforward of rho0"},
            {"surviving_mass", setup.grid.h * accurate_sum(rho1_cm)},
            {"c1", cm.c1}};
        dichotomy["usbp"] = {{"flow_deviation_from_prior", usbp_flow_dev},
                             {"drift_correction_sup", usbp_drift_dev},
                             {"alpha_minus_one_sup", usbp_alpha_dev}};
        dichotomy["reweighted"] = {{"flow_deviation_from_prior", rw_flow_dev},
                                   {"drift_correction_sup", rw_drift_dev}};
        {
            auto f = output.open("dichotomy_report.json");
            f << dichotomy.dump(2) << "\n";
        }

        ordered_json summary;
        summary["reweighted_max_deviation_across_s"] = max_dev;
        summary["dichotomy"] = std::move(dichotomy);
        output.finalize(std::move(summary));
    });
}

int cmd_simulate(const RunConfig& cfg, const std::filesystem::path& out_dir,
                 int n_threads) {
    return run_command("simulate", cfg, out_dir, [&](CommandOutput& output) {
        if (!cfg.mc) {
            throw ConfigError("simulate: config must provide an \"mc\" block");
        }
        ExperimentSetup setup = make_setup(cfg);
        BundleOptions bopts;
        bopts.tol_mass = cfg.tol_mass;
        bopts.n_threads = n_threads;
        const KernelBundle bundle =
            build_kernel_bundle(setup.spec, setup.grid, setup.tm, bopts);
        const int mid = bundle.tm.n_steps / 2;
        const int last = bundle.tm.n_steps;
        const std::vector<int> snaps{0, mid, last};
        const int bins = largest_bin_divisor(setup.grid.n_cells);

        const ParticleEnsemble prior =
            simulate_prior(setup.spec, setup.grid, bundle.tm, setup.rho0,
                           cfg.mc->n_particles, cfg.mc->seed, snaps);

        const std::vector<SolvedInstance> results =
            solve_all(setup, bundle, cfg, n_threads);

        auto csv = output.open("mc_summary.csv");
        csv << "s,alive_fraction,tv_distance_t1,tv_distance_tmid\n";
        ordered_json per_s = ordered_json::array();
        for (const auto& si : results) {
            const ParticleEnsemble post =
                simulate_posterior(si.sol, setup.spec, bundle, setup.rho0,
                                   cfg.mc->n_particles, cfg.mc->seed, snaps);
            const double alive = post.alive_fraction(last);
            const double tv1 =
                tv_distance(post, last, si.sol.marginal_P.row(last), setup.grid, bins);
            const double tvm =
                tv_distance(post, mid, si.sol.marginal_P.row(mid), setup.grid, bins);
            csv << fmt_s(si.s) << ',' << fmt17(alive) << ',' << fmt17(tv1) << ','
                << fmt17(tvm) << "\n";
            per_s.push_back(ordered_json{{"s", si.s},
                                         {"alive_fraction", alive},
                                         {"tv_distance_t1", tv1},
                                         {"tv_distance_tmid", tvm}});
        }
        csv.close();

        ordered_json summary;
        summary["n_particles"] = cfg.mc->n_particles;
        summary["seed"] = cfg.mc->seed;
        summary["histogram_bins"] = bins;
        summary["prior_alive_fraction"] = prior.alive_fraction(last);
        summary["per_s"] = std::move(per_s);
        output.finalize(std::move(summary));
    });
}

int cmd_oracle_check(const RunConfig& cfg, const std::filesystem::path& out_dir,
                     int n_threads) {
    return run_command("oracle-check", cfg, out_dir, [&](CommandOutput& output) {
        if (cfg.n_cells > 64) {
            throw ConfigError("oracle-check: n_cells must be <= 64");
        }
        ExperimentSetup setup = make_setup(cfg);
        BundleOptions bopts;
        bopts.tol_mass = cfg.tol_mass;
        bopts.n_threads = n_threads;
        const KernelBundle bundle =
            build_kernel_bundle(setup.spec, setup.grid, setup.tm, bopts);

        const double s = cfg.s_list.front();
        ProblemInstance inst =
            ProblemInstance::make(setup.grid, setup.rho0, setup.rho1_for(s));
        SolveOptions opts;
        opts.tol = std::min(cfg.solver_tol, 1e-12);
        opts.max_iter = std::max(cfg.max_iter, 200000);
        BridgeSolution sol = solve(inst, bundle, opts);
        assemble_posterior(setup.spec, bundle, sol);

        const StaticCoupling oracle = static_oracle(inst, bundle);
        const StaticFactors factors = static_factors(sol, inst);
        const std::vector<double> pi_dyn =
            coupling_from_factors(factors, oracle.prior, setup.grid.n_cells);
        double gap = 0.0;
        for (std::size_t k = 0; k < pi_dyn.size(); ++k) {
            gap = std::max(gap, std::abs(pi_dyn[k] - oracle.pi[k]));
        }

        const EigenvalueCertificate cert = fixed_point_eigenvalue(sol, inst, bundle);

        SolveOptions scaled = opts;
        scaled.init_scale = 5.0;
        BridgeSolution sol5 = solve(inst, bundle, scaled);
        assemble_posterior(setup.spec, bundle, sol5);
        double gauge_gap = 0.0;
        for (int k = 0; k <= bundle.tm.n_steps; ++k) {
            for (int i = 0; i < setup.grid.n_cells; ++i) {
                gauge_gap = std::max(gauge_gap, std::abs(sol.marginal_P(k, i) -
                                                         sol5.marginal_P(k, i)));
            }
        }

        ordered_json report;
        report["s"] = s;
        report["coupling_max_gap"] = gap;
        report["oracle_entropy"] = oracle.entropy;
        report["oracle_ipf_iterations"] = oracle.iterations;
        report["fixed_point_eigenvalue"] = {{"ratio", cert.ratio},
                                            {"spread", cert.spread}};
        report["gauge_flow_gap"] = gauge_gap;
        {
            auto f = output.open("oracle_report.json");
            f << report.dump(2) << "\n";
        }
        output.finalize(std::move(report));
    });
}

} // namespace ubridge
