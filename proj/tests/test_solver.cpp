#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "ubridge/baselines.hpp"
#include "ubridge/experiment.hpp"
#include "ubridge/grid.hpp"
#include "ubridge/solver.hpp"

using namespace ubridge;

namespace {

struct Fixture {
    SpaceGrid grid;
    TimeMesh tm;
    KilledDiffusionSpec spec;
    KernelBundle bundle;
    std::vector<double> rho0;

    Fixture(int n_cells, int n_steps, double sigma, double V)
        : grid(SpaceGrid::uniform(0.0, 1.0, n_cells)), tm(TimeMesh::uniform(n_steps)),
          spec(KilledDiffusionSpec::constant(0.0, sigma, V)),
          bundle(build_kernel_bundle(spec, grid, tm)) {
        rho0 = sample_density(two_lobe_density, grid);
        normalize_mass(rho0, grid, 1.0);
    }

    ProblemInstance reflected_instance(double s) const {
        std::vector<double> rho1 =
            sample_density([](double x) { return two_lobe_density(1.0 - x); }, grid);
        normalize_mass(rho1, grid, s);
        return ProblemInstance::make(grid, rho0, rho1);
    }

    ProblemInstance consistent_instance() const {
        return ProblemInstance::make(grid, rho0, bundle.kernel_transpose_apply(rho0));
    }
};

double max_abs_diff(const TimeField& a, const TimeField& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

} // namespace

TEST_CASE("problem instance validation") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 32);
    std::vector<double> rho0 = sample_density(two_lobe_density, g);
    normalize_mass(rho0, g, 1.0);

    std::vector<double> rho1 = rho0;
    normalize_mass(rho1, g, 0.6);
    const ProblemInstance inst = ProblemInstance::make(g, rho0, rho1);
    CHECK(inst.s == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(inst.c1 == doctest::Approx(0.4).epsilon(1e-10));

    std::vector<double> heavy = rho0;
    normalize_mass(heavy, g, 1.5);
    CHECK_THROWS_AS(ProblemInstance::make(g, rho0, heavy), std::invalid_argument);
    CHECK_THROWS_AS(ProblemInstance::make(g, rho1, rho1), std::invalid_argument);
}

TEST_CASE("consistent marginals make the prior a fixed point of one sweep") {
    const Fixture fx(32, 64, 0.2, 1.0);
    const ProblemInstance inst = fx.consistent_instance();

    // Starting potentials phi(0, .) = 1: the initial state is the prior's own
    // endpoint data.
    AugmentedFunction state;
    state.values = fx.bundle.kernel_transpose_apply(fx.rho0);
    state.coffin_value = fx.grid.h * accurate_dot(fx.bundle.absorbed, fx.rho0);
    CHECK(state.coffin_value == doctest::Approx(inst.c1).epsilon(1e-12));

    const SweepResult sweep = iterate_once(state, inst, fx.bundle);
    const SupportMask mask = state_mask(inst);
    CHECK(hilbert_distance(sweep.next_state, state, mask) < 1e-12);

    // and the potentials it reports are flat
    for (int k = 0; k <= fx.tm.n_steps; ++k) {
        for (int i = 0; i < fx.grid.n_cells; ++i) {
            CHECK(std::abs(sweep.potentials.phi(k, i) - 1.0) < 1e-10);
        }
    }
    CHECK(sweep.potentials.psi == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("solve on a consistent instance returns the prior") {
    const Fixture fx(32, 64, 0.2, 1.0);
    const ProblemInstance inst = fx.consistent_instance();

    BridgeSolution sol = solve(inst, fx.bundle);
    assemble_posterior(fx.spec, fx.bundle, sol);

    const ForwardSweep prior = propagate_forward(fx.bundle, fx.rho0);
    for (int k = 0; k <= fx.tm.n_steps; ++k) {
        for (int i = 0; i < fx.grid.n_cells; ++i) {
            CHECK(std::abs(sol.marginal_P(k, i) - prior.phihat(k, i)) < 1e-8);
            CHECK(std::abs(sol.drift_correction(k, i)) < 1e-8);
            if (sol.marginal_P(k, i) > 0.0) {
                CHECK(std::abs(sol.posterior_killing(k, i) - 1.0) < 1e-7);
            }
        }
    }
}

TEST_CASE("s = 1 degenerates to the balanced bridge") {
    const Fixture fx(48, 80, 0.15, 1.0);
    const ProblemInstance inst = fx.reflected_instance(1.0);
    CHECK(inst.c1 == 0.0);

    SolveOptions opts;
    opts.tol = 1e-12;
    opts.max_iter = 200000;
    BridgeSolution sol = solve(inst, fx.bundle, opts);
    assemble_posterior(fx.spec, fx.bundle, sol);

    // psi = 0: no posterior killing, no coffin mass
    CHECK(sol.potentials.psi == 0.0);
    for (double q : sol.coffin_mass) CHECK(q == 0.0);
    for (double v : sol.posterior_killing.data) CHECK(v == 0.0);

    const ClassicBridge classic =
        solve_classic(fx.rho0, inst.rho1, fx.bundle, 1e-12, 200000);
    CHECK(max_abs_diff(sol.marginal_P, classic.flow) < 1e-6);
}

TEST_CASE("one application of the map keeps a converged state put") {
    const Fixture fx(32, 64, 0.2, 1.0);
    const ProblemInstance inst = fx.reflected_instance(0.6);

    SolveOptions opts;
    opts.tol = 1e-12;
    opts.max_iter = 200000;
    const BridgeSolution sol = solve(inst, fx.bundle, opts);

    AugmentedFunction state;
    state.values.assign(sol.potentials.phihat.row(fx.tm.n_steps).begin(),
                        sol.potentials.phihat.row(fx.tm.n_steps).end());
    state.coffin_value = sol.potentials.psihat.back();

    const SweepResult sweep = iterate_once(state, inst, fx.bundle);
    CHECK(hilbert_distance(sweep.next_state, state, state_mask(inst)) < 1e-10);
}

TEST_CASE("solve meets the endpoint constraints and conserves augmented mass") {
    const Fixture fx(48, 96, 0.1, 1.0);
    const ProblemInstance inst = fx.reflected_instance(0.6);

    SolveOptions opts;
    opts.tol = 1e-10;
    opts.max_iter = 200000;
    BridgeSolution sol = solve(inst, fx.bundle, opts);
    assemble_posterior(fx.spec, fx.bundle, sol);

    const int last = fx.tm.n_steps;
    CHECK(std::abs(sol.coffin_mass[static_cast<std::size_t>(last)] - 0.4) < 1e-6);
    CHECK(std::abs(fx.grid.h * accurate_sum(sol.marginal_P.row(last)) - 0.6) < 1e-6);

    // augmented conservation and monotone losses at every node
    double prev_coffin = -1.0;
    double prev_mass = 2.0;
    for (int k = 0; k <= last; ++k) {
        const double mass = fx.grid.h * accurate_sum(sol.marginal_P.row(k));
        const double coffin = sol.coffin_mass[static_cast<std::size_t>(k)];
        CHECK(std::abs(mass + coffin - 1.0) < 1e-5);
        CHECK(coffin >= prev_coffin);
        CHECK(mass <= prev_mass + 1e-12);
        prev_coffin = coffin;
        prev_mass = mass;
    }

    // psihat starts at zero and never decreases
    CHECK(sol.potentials.psihat.front() == 0.0);
    for (std::size_t k = 0; k + 1 < sol.potentials.psihat.size(); ++k) {
        CHECK(sol.potentials.psihat[k + 1] >= sol.potentials.psihat[k]);
    }

    // the iteration contracted
    const double fitted = sol.hilbert_report.fitted_ratio();
    CHECK(fitted < 1.0);
    CHECK(sol.hilbert_report.birkhoff_bound.has_value());
}

TEST_CASE("initial scaling is a gauge freedom") {
    const Fixture fx(32, 64, 0.15, 1.0);
    const ProblemInstance inst = fx.reflected_instance(0.4);

    SolveOptions opts;
    opts.tol = 1e-11;
    opts.max_iter = 200000;
    BridgeSolution a = solve(inst, fx.bundle, opts);
    assemble_posterior(fx.spec, fx.bundle, a);

    opts.init_scale = 7.7;
    BridgeSolution b = solve(inst, fx.bundle, opts);
    assemble_posterior(fx.spec, fx.bundle, b);

    CHECK(max_abs_diff(a.marginal_P, b.marginal_P) < 1e-8);
    CHECK(max_abs_diff(a.drift_correction, b.drift_correction) < 1e-8);
    CHECK(max_abs_diff(a.posterior_killing, b.posterior_killing) < 1e-8);
}

TEST_CASE("fixed point eigenvalue certificate") {
    const Fixture fx(32, 64, 0.2, 1.0);

    SUBCASE("converged state has ratio one and no spread") {
        const ProblemInstance inst = fx.reflected_instance(0.6);
        SolveOptions opts;
        opts.tol = 1e-11;
        opts.max_iter = 200000;
        const BridgeSolution sol = solve(inst, fx.bundle, opts);
        const EigenvalueCertificate cert = fixed_point_eigenvalue(sol, inst, fx.bundle);
        CHECK(std::abs(cert.ratio - 1.0) < 1e-8);
        CHECK(cert.spread < 1e-8);
    }

    SUBCASE("an unconverged state is flagged by the spread") {
        const ProblemInstance inst = fx.reflected_instance(0.6);
        // one iteration from scratch is far from the fixed point
        AugmentedFunction state;
        state.values = fx.bundle.kernel_transpose_apply(fx.rho0);
        state.coffin_value = fx.grid.h * accurate_dot(fx.bundle.absorbed, fx.rho0);
        const SweepResult sweep = iterate_once(state, inst, fx.bundle);

        BridgeSolution fake;
        fake.potentials = sweep.potentials;
        const EigenvalueCertificate cert =
            fixed_point_eigenvalue(fake, inst, fx.bundle);
        CHECK(cert.spread > 1e-6);
    }

    SUBCASE("prior endpoint data of a consistent instance is already fixed") {
        const ProblemInstance inst = fx.consistent_instance();
        SolveOptions opts;
        opts.tol = 1e-12;
        BridgeSolution sol = solve(inst, fx.bundle, opts);
        const EigenvalueCertificate cert = fixed_point_eigenvalue(sol, inst, fx.bundle);
        CHECK(std::abs(cert.ratio - 1.0) < 1e-8);
        CHECK(cert.spread < 1e-8);
    }
}

TEST_CASE("the two backward coffin rules produce the same composed map") {
    const Fixture fx(32, 64, 0.2, 1.0);
    const ProblemInstance inst = fx.reflected_instance(0.6);

    AugmentedFunction state;
    state.values = fx.bundle.kernel_transpose_apply(fx.rho0);
    state.coffin_value = fx.grid.h * accurate_dot(fx.bundle.absorbed, fx.rho0);

    const SweepResult std_rule = iterate_once(state, inst, fx.bundle);
    const SweepResult anchored =
        iterate_once(state, inst, fx.bundle, CoffinRule::anchored, 16);

    // E2 and E2' disagree midway ...
    CHECK(std_rule.coffin_out != anchored.coffin_out);
    // ... but the composed images coincide.
    double gap = std::abs(std_rule.next_state.coffin_value -
                          anchored.next_state.coffin_value);
    for (std::size_t i = 0; i < std_rule.next_state.values.size(); ++i) {
        gap = std::max(gap, std::abs(std_rule.next_state.values[i] -
                                     anchored.next_state.values[i]));
    }
    CHECK(gap < 1e-10);
}

TEST_CASE("sweep-based and kernel-based iterations agree") {
    const Fixture fx(32, 48, 0.2, 1.0);
    const ProblemInstance inst = fx.reflected_instance(0.5);

    SolveOptions fast;
    fast.tol = 1e-11;
    fast.max_iter = 200000;
    SolveOptions sweepy = fast;
    sweepy.use_kernel_map = false;

    BridgeSolution a = solve(inst, fx.bundle, fast);
    BridgeSolution b = solve(inst, fx.bundle, sweepy);
    assemble_posterior(fx.spec, fx.bundle, a);
    assemble_posterior(fx.spec, fx.bundle, b);
    CHECK(max_abs_diff(a.marginal_P, b.marginal_P) < 1e-9);
}

TEST_CASE("support restriction of the target is honored") {
    const Fixture fx(48, 64, 0.2, 1.0);
    // target supported on the left half only
    std::vector<double> rho1(static_cast<std::size_t>(fx.grid.n_cells), 0.0);
    for (int i = 0; i < fx.grid.n_cells / 2; ++i) {
        rho1[static_cast<std::size_t>(i)] = 1.0;
    }
    normalize_mass(rho1, fx.grid, 0.5);
    const ProblemInstance inst = ProblemInstance::make(fx.grid, fx.rho0, rho1);

    SolveOptions opts;
    opts.tol = 1e-10;
    opts.max_iter = 200000;
    BridgeSolution sol = solve(inst, fx.bundle, opts);
    assemble_posterior(fx.spec, fx.bundle, sol);

    const int last = fx.tm.n_steps;
    for (int i = 0; i < fx.grid.n_cells; ++i) {
        if (rho1[static_cast<std::size_t>(i)] == 0.0) {
            CHECK(sol.marginal_P(last, i) == 0.0);
        } else {
            CHECK(sol.marginal_P(last, i) ==
                  doctest::Approx(rho1[static_cast<std::size_t>(i)]).epsilon(1e-8));
        }
    }
}

TEST_CASE("error paths") {
    SUBCASE("c1 > 0 with a never-killing prior is rejected") {
        const Fixture fx(32, 48, 0.2, 0.0);  // V = 0
        const ProblemInstance inst = fx.reflected_instance(0.6);
        CHECK_THROWS_WITH_AS(solve(inst, fx.bundle),
                             doctest::Contains("never kills"), std::runtime_error);
    }
    SUBCASE("iteration budget is enforced") {
        const Fixture fx(32, 48, 0.05, 1.0);
        const ProblemInstance inst = fx.reflected_instance(0.6);
        SolveOptions opts;
        opts.tol = 1e-12;
        opts.max_iter = 2;
        CHECK_THROWS_AS(solve(inst, fx.bundle, opts), ConvergenceError);
        try {
            solve(inst, fx.bundle, opts);
        } catch (const ConvergenceError& e) {
            CHECK(e.iterations == 2);
            CHECK(e.last_distance > 0.0);
        }
    }
}

TEST_CASE("static factors reproduce both marginals of the coupling") {
    const Fixture fx(16, 48, 0.25, 1.0);
    const ProblemInstance inst = fx.reflected_instance(0.7);

    SolveOptions opts;
    opts.tol = 1e-12;
    opts.max_iter = 200000;
    const BridgeSolution sol = solve(inst, fx.bundle, opts);
    const StaticFactors factors = static_factors(sol, inst);

    const std::vector<double> joint = build_prior_joint(fx.rho0, fx.bundle);
    const std::vector<double> pi =
        coupling_from_factors(factors, joint, fx.grid.n_cells);

    const int m = fx.grid.n_cells + 1;
    const double h = fx.grid.h;
    for (int i = 0; i < fx.grid.n_cells; ++i) {
        long double row = 0.0L;
        for (int j = 0; j < m; ++j) row += pi[static_cast<std::size_t>(i) * m + j];
        CHECK(std::abs(static_cast<double>(row) -
                       fx.rho0[static_cast<std::size_t>(i)] * h) < 1e-7);
    }
    for (int j = 0; j < fx.grid.n_cells; ++j) {
        long double col = 0.0L;
        for (int i = 0; i < m; ++i) col += pi[static_cast<std::size_t>(i) * m + j];
        CHECK(std::abs(static_cast<double>(col) -
                       inst.rho1[static_cast<std::size_t>(j)] * h) < 1e-7);
    }
    long double coffin_col = 0.0L;
    for (int i = 0; i < m; ++i) {
        coffin_col += pi[static_cast<std::size_t>(i) * m + (m - 1)];
    }
    CHECK(std::abs(static_cast<double>(coffin_col) - inst.c1) < 1e-8);
}

TEST_CASE("coffin flux identity of the assembled solution") {
    // The discrete coffin mass increments follow the posterior killing flux
    // through the trapezoidal rule exactly:
    //   (q_{k+1} - q_k)/dt - flux_k == (flux_{k+1} - flux_k)/2.
    const Fixture fx(32, 64, 0.1, 1.0);
    const ProblemInstance inst = fx.reflected_instance(0.4);
    SolveOptions opts;
    opts.tol = 1e-11;
    opts.max_iter = 200000;
    BridgeSolution sol = solve(inst, fx.bundle, opts);
    assemble_posterior(fx.spec, fx.bundle, sol);

    const double h = fx.grid.h;
    const double dt = fx.tm.dt;
    std::vector<double> flux(static_cast<std::size_t>(fx.tm.n_steps + 1));
    for (int k = 0; k <= fx.tm.n_steps; ++k) {
        long double acc = 0.0L;
        for (int i = 0; i < fx.grid.n_cells; ++i) {
            acc += sol.posterior_killing(k, i) * sol.marginal_P(k, i);
        }
        flux[static_cast<std::size_t>(k)] = h * static_cast<double>(acc);
    }
    for (int k = 0; k < fx.tm.n_steps; ++k) {
        const double lhs = (sol.coffin_mass[static_cast<std::size_t>(k + 1)] -
                            sol.coffin_mass[static_cast<std::size_t>(k)]) /
                               dt -
                           flux[static_cast<std::size_t>(k)];
        const double rhs = 0.5 * (flux[static_cast<std::size_t>(k + 1)] -
                                  flux[static_cast<std::size_t>(k)]);
        CHECK(std::abs(lhs - rhs) < 1e-9);
    }
}
