#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "ubridge/baselines.hpp"
#include "ubridge/experiment.hpp"
#include "ubridge/grid.hpp"
#include "ubridge/solver.hpp"

using namespace ubridge;

namespace {

std::vector<double> bump(const SpaceGrid& g, double center, double width) {
    std::vector<double> v(static_cast<std::size_t>(g.n_cells));
    for (int i = 0; i < g.n_cells; ++i) {
        const double z = (g.center(i) - center) / width;
        v[static_cast<std::size_t>(i)] = std::exp(-0.5 * z * z) + 0.02;
    }
    normalize_mass(v, g, 1.0);
    return v;
}

double max_abs_diff(const TimeField& a, const TimeField& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

// Plain two-sided scaling of a small positive matrix: the reference result
// for solve_classic, independent of the propagation machinery.
struct TinySinkhorn {
    std::vector<double> u, v;  // pi_ij = u_i k_ij v_j
};

TinySinkhorn tiny_sinkhorn(const std::vector<double>& k, int n,
                           const std::vector<double>& row_mass,
                           const std::vector<double>& col_mass, int iters) {
    TinySinkhorn s;
    s.u.assign(static_cast<std::size_t>(n), 1.0);
    s.v.assign(static_cast<std::size_t>(n), 1.0);
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) {
                acc += k[static_cast<std::size_t>(i) * n + j] *
                       s.v[static_cast<std::size_t>(j)];
            }
            s.u[static_cast<std::size_t>(i)] = row_mass[static_cast<std::size_t>(i)] / acc;
        }
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                acc += k[static_cast<std::size_t>(i) * n + j] *
                       s.u[static_cast<std::size_t>(i)];
            }
            s.v[static_cast<std::size_t>(j)] = col_mass[static_cast<std::size_t>(j)] / acc;
        }
    }
    return s;
}

} // namespace

TEST_CASE("classic bridge on consistent marginals is the prior") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 32);
    const TimeMesh tm = TimeMesh::uniform(64);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.2, 0.0);  // no killing
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);

    const std::vector<double> rho0 = bump(g, 0.4, 0.15);
    const std::vector<double> rho1 = bundle.kernel_transpose_apply(rho0);

    const ClassicBridge bridge = solve_classic(rho0, rho1, bundle, 1e-12, 200000);

    // phi is constant in space: zero drift correction
    for (int k = 0; k <= tm.n_steps; ++k) {
        const auto row = bridge.phi.row(k);
        for (int i = 1; i < g.n_cells; ++i) {
            CHECK(std::abs(std::log(row[static_cast<std::size_t>(i)]) -
                           std::log(row[0])) < 1e-8);
        }
    }
    const ForwardSweep prior = propagate_forward(bundle, rho0);
    CHECK(max_abs_diff(bridge.flow, prior.phihat) < 1e-8);
}

TEST_CASE("classic bridge of mirrored marginals has a symmetric midpoint") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 64);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.25, 0.0);
    // sigma^2 dt / (2 h^2) must stay below one; 256 steps keeps the builder
    // from refining the mesh under our feet
    const KernelBundle bundle =
        build_kernel_bundle(spec, g, TimeMesh::uniform(256));
    const TimeMesh& tm = bundle.tm;
    REQUIRE(bundle.refinements == 0);

    std::vector<double> rho0 = sample_density(two_lobe_density, g);
    normalize_mass(rho0, g, 1.0);
    std::vector<double> rho1 =
        sample_density([](double x) { return two_lobe_density(1.0 - x); }, g);
    normalize_mass(rho1, g, 1.0);

    const ClassicBridge bridge = solve_classic(rho0, rho1, bundle, 1e-12, 200000);
    const auto mid = bridge.flow.row(tm.n_steps / 2);
    for (int i = 0; i < g.n_cells; ++i) {
        CHECK(std::abs(mid[static_cast<std::size_t>(i)] -
                       mid[static_cast<std::size_t>(g.n_cells - 1 - i)]) < 1e-6);
    }
    // unit mass at every time
    for (int k = 0; k <= tm.n_steps; ++k) {
        CHECK(std::abs(g.h * accurate_sum(bridge.flow.row(k)) - 1.0) < 1e-10);
    }
}

TEST_CASE("classic bridge endpoint coupling matches a tiny reference scaling") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 3);
    const TimeMesh tm = TimeMesh::uniform(16);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.4, 0.0);
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);

    const std::vector<double> rho0{1.2, 0.9, 0.9};
    std::vector<double> r0 = rho0;
    normalize_mass(r0, g, 1.0);
    std::vector<double> r1{0.6, 0.9, 1.5};
    normalize_mass(r1, g, 1.0);

    const ClassicBridge bridge = solve_classic(r0, r1, bundle, 1e-13, 100000);

    // reference: scale bundle.kernel directly to the cell-mass marginals
    std::vector<double> kmat(bundle.kernel);
    std::vector<double> row_mass(3), col_mass(3);
    for (int i = 0; i < 3; ++i) row_mass[static_cast<std::size_t>(i)] = r0[static_cast<std::size_t>(i)] * g.h;
    for (int j = 0; j < 3; ++j) col_mass[static_cast<std::size_t>(j)] = r1[static_cast<std::size_t>(j)] * g.h;
    const TinySinkhorn ref = tiny_sinkhorn(kmat, 3, row_mass, col_mass, 4000);

    // endpoint coupling from the bridge potentials:
    //   pi_ij = phihat(0,i) h K_ij phi(1,j)
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            const double lib = bridge.phihat(0, i) * g.h * bundle.k_at(i, j) *
                               bridge.phi(tm.n_steps, j);
            const double oracle = ref.u[static_cast<std::size_t>(i)] *
                                  kmat[static_cast<std::size_t>(i) * 3 + j] *
                                  ref.v[static_cast<std::size_t>(j)];
            CHECK(std::abs(lib - oracle) < 1e-8);
        }
    }
}

TEST_CASE("reweighted flow does not depend on the surviving fraction") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 48);
    const TimeMesh tm = TimeMesh::uniform(64);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.1, 1.0);
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);

    std::vector<double> rho0 = sample_density(two_lobe_density, g);
    normalize_mass(rho0, g, 1.0);
    std::vector<double> profile =
        sample_density([](double x) { return two_lobe_density(1.0 - x); }, g);

    std::vector<ReweightedBridge> bridges;
    for (double s : {0.4, 0.6, 0.8}) {
        std::vector<double> rho1 = profile;
        normalize_mass(rho1, g, s);
        bridges.push_back(solve_reweighted(rho0, rho1, bundle, 1e-12, 200000));
    }
    CHECK(max_abs_diff(bridges[0].flow, bridges[1].flow) < 1e-8);
    CHECK(max_abs_diff(bridges[0].flow, bridges[2].flow) < 1e-8);

    // probability at all times
    for (int k = 0; k <= tm.n_steps; ++k) {
        CHECK(std::abs(g.h * accurate_sum(bridges[0].flow.row(k)) - 1.0) < 1e-10);
    }
}

TEST_CASE("reweighted bridge with s = 1 equals the unbalanced one") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 48);
    const TimeMesh tm = TimeMesh::uniform(64);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.15, 1.0);
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);

    std::vector<double> rho0 = sample_density(two_lobe_density, g);
    normalize_mass(rho0, g, 1.0);
    std::vector<double> rho1 =
        sample_density([](double x) { return two_lobe_density(1.0 - x); }, g);
    normalize_mass(rho1, g, 1.0);

    const ReweightedBridge rw = solve_reweighted(rho0, rho1, bundle, 1e-12, 200000);

    const ProblemInstance inst = ProblemInstance::make(g, rho0, rho1);
    SolveOptions opts;
    opts.tol = 1e-12;
    opts.max_iter = 200000;
    BridgeSolution sol = solve(inst, bundle, opts);
    assemble_posterior(spec, bundle, sol);

    CHECK(max_abs_diff(rw.flow, sol.marginal_P) < 1e-6);
}

TEST_CASE("reweighted bridge is not the prior on a consistent instance") {
    // Spatially varying killing: the survivor-only reweighing then tilts the
    // time-0 distribution and the bridge must steer against it.
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 64);
    const TimeMesh tm = TimeMesh::uniform(64);
    KilledDiffusionSpec spec = KilledDiffusionSpec::constant(0.0, 0.1, 1.0);
    spec.killing = [](double, double x) {
        return 1.0 + 0.5 * std::cos(2.0 * std::numbers::pi * x);
    };
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);

    std::vector<double> rho0 = sample_density(two_lobe_density, g);
    normalize_mass(rho0, g, 1.0);
    const std::vector<double> rho1 = bundle.kernel_transpose_apply(rho0);

    const ReweightedBridge rw = solve_reweighted(rho0, rho1, bundle, 1e-12, 200000);
    double drift_sup = 0.0;
    for (int k = 0; k <= tm.n_steps; ++k) {
        const double t = tm.t(k);
        for (int i = 1; i + 1 < g.n_cells; ++i) {
            const double dlog = (std::log(rw.phi(k, i + 1)) -
                                 std::log(rw.phi(k, i - 1))) /
                                (2.0 * g.h);
            drift_sup = std::max(drift_sup,
                                 std::abs(spec.a(t, g.center(i)) * dlog));
        }
    }
    CHECK(drift_sup > 1e-3);
}

TEST_CASE("static oracle on a feasible prior instance returns the prior") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 16);
    const TimeMesh tm = TimeMesh::uniform(48);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.3, 1.0);
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);

    const std::vector<double> rho0 = bump(g, 0.5, 0.2);
    const ProblemInstance inst =
        ProblemInstance::make(g, rho0, bundle.kernel_transpose_apply(rho0));

    const StaticCoupling oracle = static_oracle(inst, bundle);
    CHECK(oracle.entropy < 1e-10);
    for (std::size_t k = 0; k < oracle.pi.size(); ++k) {
        CHECK(std::abs(oracle.pi[k] - oracle.prior[k]) < 1e-10);
    }
}

TEST_CASE("static oracle marginals and coffin column") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 16);
    const TimeMesh tm = TimeMesh::uniform(48);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.3, 1.0);
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);

    const std::vector<double> rho0 = bump(g, 0.35, 0.15);
    std::vector<double> rho1 = bump(g, 0.65, 0.2);
    normalize_mass(rho1, g, 0.7);
    const ProblemInstance inst = ProblemInstance::make(g, rho0, rho1);

    const StaticCoupling oracle = static_oracle(inst, bundle);
    const int m = g.n_cells + 1;
    long double coffin = 0.0L;
    for (int i = 0; i < m; ++i) coffin += oracle.at(i, m - 1);
    CHECK(std::abs(static_cast<double>(coffin) - inst.c1) < 1e-10);

    for (int i = 0; i < g.n_cells; ++i) {
        long double row = 0.0L;
        for (int j = 0; j < m; ++j) row += oracle.at(i, j);
        CHECK(std::abs(static_cast<double>(row) -
                       rho0[static_cast<std::size_t>(i)] * g.h) < 1e-10);
    }
    // pi vanishes wherever the prior joint does (absolute continuity)
    for (int j = 0; j < m; ++j) CHECK(oracle.at(m - 1, j) == 0.0);
}

TEST_CASE("dynamic solution factorizes onto the oracle coupling") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 16);
    const TimeMesh tm = TimeMesh::uniform(48);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.3, 1.0);
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);

    std::vector<double> rho0 = sample_density(two_lobe_density, g);
    normalize_mass(rho0, g, 1.0);
    std::vector<double> rho1 =
        sample_density([](double x) { return two_lobe_density(1.0 - x); }, g);
    normalize_mass(rho1, g, 0.6);
    const ProblemInstance inst = ProblemInstance::make(g, rho0, rho1);

    SolveOptions opts;
    opts.tol = 1e-12;
    opts.max_iter = 200000;
    const BridgeSolution sol = solve(inst, bundle, opts);
    const StaticFactors factors = static_factors(sol, inst);
    const std::vector<double> pi_dyn =
        coupling_from_factors(factors, build_prior_joint(rho0, bundle), g.n_cells);

    const StaticCoupling oracle = static_oracle(inst, bundle);
    for (std::size_t k = 0; k < pi_dyn.size(); ++k) {
        CHECK(std::abs(pi_dyn[k] - oracle.pi[k]) < 1e-7);
    }
}

TEST_CASE("oracle coupling beats random feasible competitors in entropy") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 12);
    const TimeMesh tm = TimeMesh::uniform(32);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.3, 1.0);
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);

    const std::vector<double> rho0 = bump(g, 0.4, 0.2);
    std::vector<double> rho1 = bump(g, 0.6, 0.25);
    normalize_mass(rho1, g, 0.65);
    const ProblemInstance inst = ProblemInstance::make(g, rho0, rho1);

    const StaticCoupling oracle = static_oracle(inst, bundle);
    const int m = g.n_cells + 1;

    std::vector<double> row_target(static_cast<std::size_t>(m), 0.0);
    std::vector<double> col_target(static_cast<std::size_t>(m), 0.0);
    for (int i = 0; i < g.n_cells; ++i) {
        row_target[static_cast<std::size_t>(i)] = rho0[static_cast<std::size_t>(i)] * g.h;
        col_target[static_cast<std::size_t>(i)] = rho1[static_cast<std::size_t>(i)] * g.h;
    }
    col_target[static_cast<std::size_t>(g.n_cells)] = inst.c1;

    std::mt19937 rng(99);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        // multiplicative perturbation, re-projected onto the marginals
        std::vector<double> pi = oracle.pi;
        for (double& v : pi) v *= std::exp(0.25 * u(rng));
        for (int round = 0; round < 400; ++round) {
            for (int i = 0; i < m; ++i) {
                long double rs = 0.0L;
                for (int j = 0; j < m; ++j) rs += pi[static_cast<std::size_t>(i) * m + j];
                if (rs > 0.0L) {
                    const double sc = static_cast<double>(row_target[static_cast<std::size_t>(i)] / rs);
                    for (int j = 0; j < m; ++j) pi[static_cast<std::size_t>(i) * m + j] *= sc;
                }
            }
            for (int j = 0; j < m; ++j) {
                long double cs = 0.0L;
                for (int i = 0; i < m; ++i) cs += pi[static_cast<std::size_t>(i) * m + j];
                if (cs > 0.0L) {
                    const double sc = static_cast<double>(col_target[static_cast<std::size_t>(j)] / cs);
                    for (int i = 0; i < m; ++i) pi[static_cast<std::size_t>(i) * m + j] *= sc;
                }
            }
        }
        CHECK(oracle.entropy <= relative_entropy(pi, oracle.prior) + 1e-8);
    }
}

TEST_CASE("oracle rejects unreachable coffin mass") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 12);
    const TimeMesh tm = TimeMesh::uniform(32);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.3, 0.0);  // no killing
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);

    const std::vector<double> rho0 = bump(g, 0.5, 0.2);
    std::vector<double> rho1 = bump(g, 0.5, 0.2);
    normalize_mass(rho1, g, 0.5);  // c1 = 0.5 but r = 0
    const ProblemInstance inst = ProblemInstance::make(g, rho0, rho1);
    CHECK_THROWS_AS(static_oracle(inst, bundle), std::runtime_error);
}

TEST_CASE("oracle enforces the desk-scale cap") {
    const SpaceGrid g = SpaceGrid::uniform(0.0, 1.0, 96);
    const TimeMesh tm = TimeMesh::uniform(16);
    const auto spec = KilledDiffusionSpec::constant(0.0, 0.3, 1.0);
    const KernelBundle bundle = build_kernel_bundle(spec, g, tm);
    const std::vector<double> rho0 = bump(g, 0.5, 0.2);
    std::vector<double> rho1 = rho0;
    normalize_mass(rho1, g, 0.8);
    const ProblemInstance inst = ProblemInstance::make(g, rho0, rho1);
    CHECK_THROWS_AS(static_oracle(inst, bundle), std::invalid_argument);
}
