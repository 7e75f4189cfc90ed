#include "ubridge/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace ubridge {

namespace {

// Componentwise rho / v on the support of rho, 0 elsewhere. Throws when the
// kernel left a zero potential under positive marginal mass.
std::vector<double> divide_on_support(std::span<const double> rho,
                                      std::span<const double> v) {
    std::vector<double> out(rho.size(), 0.0);
    for (std::size_t i = 0; i < rho.size(); ++i) {
        if (rho[i] > 0.0) {
            if (!(v[i] > 0.0)) {
                throw std::runtime_error("kernel does not connect supports");
            }
            out[i] = rho[i] / v[i];
        }
    }
    return out;
}

double sup_norm(const AugmentedFunction& x, const SupportMask& mask) {
    double m = 0.0;
    for (std::size_t i = 0; i < x.values.size(); ++i) {
        if (mask.cells[i]) m = std::max(m, std::abs(x.values[i]));
    }
    if (mask.coffin) m = std::max(m, std::abs(x.coffin_value));
    return m;
}

} // namespace

ProblemInstance ProblemInstance::make(const SpaceGrid& g, std::vector<double> rho0,
                                      std::vector<double> rho1) {
    if (static_cast<int>(rho0.size()) != g.n_cells ||
        static_cast<int>(rho1.size()) != g.n_cells) {
        throw std::invalid_argument("ProblemInstance: marginal size mismatch");
    }
    const double m0 = g.h * accurate_sum(rho0);
    if (std::abs(m0 - 1.0) > 1e-10) {
        throw std::invalid_argument("ProblemInstance: rho0 must have unit mass");
    }
    for (double x : rho0) {
        if (x < 0.0) throw std::invalid_argument("ProblemInstance: rho0 negative");
    }
    for (double x : rho1) {
        if (x < 0.0) throw std::invalid_argument("ProblemInstance: rho1 negative");
    }
    ProblemInstance inst;
    inst.s = g.h * accurate_sum(rho1);
    inst.c1 = 1.0 - inst.s;
    if (!(inst.s > 0.0) || inst.c1 < -1e-10) {
        throw std::invalid_argument(
            "ProblemInstance: rho1 mass must lie in (0, 1]");
    }
    inst.c1 = std::max(inst.c1, 0.0);
    inst.rho0 = std::move(rho0);
    inst.rho1 = std::move(rho1);
    return inst;
}

SupportMask state_mask(const ProblemInstance& inst) {
    return SupportMask::from_support(inst.rho1, inst.c1 > 0.0);
}

SweepResult iterate_once(const AugmentedFunction& state, const ProblemInstance& inst,
                         const KernelBundle& bundle, CoffinRule rule,
                         int anchor_cell) {
    const int n = bundle.grid.n_cells;
    const int steps = bundle.tm.n_steps;

    // E1 + E2: phi(1) = rho1 / phihat(1) on supp rho1, psi = c1 / psihat(1),
    // then the backward sweep with source psi V.
    std::vector<double> phi1 = divide_on_support(inst.rho1, state.values);
    double psi = 0.0;
    if (inst.c1 > 0.0) {
        if (!(state.coffin_value > 0.0)) {
            throw std::runtime_error(
                "iterate_once: psihat(1) must be positive when c1 > 0 "
                "(prior has no absorbed mass)");
        }
        psi = inst.c1 / state.coffin_value;
    }
    BackwardSweep bw = propagate_backward(bundle, phi1, psi);

    double coffin_out = psi;
    if (rule == CoffinRule::anchored) {
        if (anchor_cell < 0 || anchor_cell >= n ||
            !(inst.rho0[static_cast<std::size_t>(anchor_cell)] > 0.0)) {
            throw std::invalid_argument("iterate_once: anchor cell outside supp rho0");
        }
        coffin_out = bw.phi(0, anchor_cell);
    }

    // E3 + E4: phihat(0) = rho0 / phi(0) on supp rho0, then the forward sweep.
    std::vector<double> phihat0 = divide_on_support(inst.rho0, bw.phi.row(0));
    ForwardSweep fw = propagate_forward(bundle, phihat0);

    SweepResult out;
    out.next_state.values.assign(fw.phihat.row(steps).begin(),
                                 fw.phihat.row(steps).end());
    out.next_state.coffin_value = fw.psihat[static_cast<std::size_t>(steps)];
    out.potentials = PotentialQuadruple{std::move(fw.phihat), std::move(fw.psihat),
                                        std::move(bw.phi), psi};
    out.coffin_out = coffin_out;
    return out;
}

namespace {

// The same composed map as iterate_once, collapsed onto the endpoint state
// through the cached kernel K and absorbed-mass vector r. Algebraically
// identical to the sweep pair because K, r and the trapezoidal accumulations
// share one mass ledger.
AugmentedFunction apply_endpoint_map(const AugmentedFunction& state,
                                     const ProblemInstance& inst,
                                     const KernelBundle& bundle) {
    const double h = bundle.grid.h;
    std::vector<double> phi1 = divide_on_support(inst.rho1, state.values);
    double psi = 0.0;
    if (inst.c1 > 0.0) {
        if (!(state.coffin_value > 0.0)) {
            throw std::runtime_error(
                "solve: psihat(1) must be positive when c1 > 0 "
                "(prior has no absorbed mass)");
        }
        psi = inst.c1 / state.coffin_value;
    }
    std::vector<double> phi0 = bundle.kernel_apply(phi1, psi);
    std::vector<double> phihat0 = divide_on_support(inst.rho0, phi0);
    AugmentedFunction next;
    next.values = bundle.kernel_transpose_apply(phihat0);
    next.coffin_value = h * accurate_dot(bundle.absorbed, phihat0);
    return next;
}

} // namespace

BridgeSolution solve(const ProblemInstance& inst, const KernelBundle& bundle,
                     const SolveOptions& opts) {
    const int n = bundle.grid.n_cells;
    const int steps = bundle.tm.n_steps;
    if (static_cast<int>(inst.rho0.size()) != n) {
        throw std::invalid_argument("solve: instance does not match bundle grid");
    }
    if (!(opts.init_scale > 0.0)) {
        throw std::invalid_argument("solve: init_scale must be positive");
    }
    if (inst.c1 > 0.0) {
        double rmax = 0.0;
        for (double x : bundle.absorbed) rmax = std::max(rmax, x);
        if (rmax <= 0.0) {
            throw std::runtime_error(
                "solve: c1 > 0 but the prior never kills (r = 0); "
                "coffin mass is unreachable");
        }
    }

    const SupportMask mask = state_mask(inst);

    // Start from phi(0, .) = init_scale, i.e. phihat(0) = rho0 / init_scale.
    std::vector<double> phihat0(inst.rho0);
    for (double& x : phihat0) x /= opts.init_scale;
    AugmentedFunction state;
    state.values = bundle.kernel_transpose_apply(phihat0);
    state.coffin_value = bundle.grid.h * accurate_dot(bundle.absorbed, phihat0);

    double log_scale = 0.0;
    {
        const double m = sup_norm(state, mask);
        for (double& x : state.values) x /= m;
        state.coffin_value /= m;
        log_scale += std::log(m);
    }

    HilbertReport report;
    std::vector<AugmentedFunction> image_sample;
    bool converged = false;
    int it = 0;
    double dist = std::numeric_limits<double>::infinity();
    for (it = 1; it <= opts.max_iter; ++it) {
        AugmentedFunction next =
            opts.use_kernel_map
                ? apply_endpoint_map(state, inst, bundle)
                : iterate_once(state, inst, bundle).next_state;
        if (image_sample.size() < 5) image_sample.push_back(next);

        const double m = sup_norm(next, mask);
        for (double& x : next.values) x /= m;
        next.coffin_value /= m;
        log_scale += std::log(m);

        dist = hilbert_distance(next, state, mask);
        report.distances.push_back(dist);
        state = std::move(next);
        if (dist < opts.tol) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        std::ostringstream msg;
        msg << "solve: no convergence after " << opts.max_iter
            << " iterations (last Hilbert distance " << dist << ")";
        throw ConvergenceError(msg.str(), opts.max_iter, dist);
    }
    report.birkhoff_bound = birkhoff_ratio(diameter_bound(image_sample));

    // Final coherent sweep pair from the converged state.
    std::vector<double> phi1 = divide_on_support(inst.rho1, state.values);
    const double psi = inst.c1 > 0.0 ? inst.c1 / state.coffin_value : 0.0;
    BackwardSweep bw = propagate_backward(bundle, phi1, psi);
    std::vector<double> phihat0_final = divide_on_support(inst.rho0, bw.phi.row(0));
    ForwardSweep fw = propagate_forward(bundle, phihat0_final);

    // Endpoint couplings (the boundary conditions of the Schroedinger
    // system). phi(0) phihat(0) = rho0 holds by construction; the t = 1 pair
    // carries the residual convergence gap.
    double rho1_scale = 0.0;
    for (double x : inst.rho1) rho1_scale = std::max(rho1_scale, x);
    double res1 = 0.0;
    for (int j = 0; j < n; ++j) {
        const double lhs = phi1[static_cast<std::size_t>(j)] * fw.phihat(steps, j);
        res1 = std::max(res1, std::abs(lhs - inst.rho1[static_cast<std::size_t>(j)]));
    }
    res1 /= rho1_scale;
    double resc = 0.0;
    if (inst.c1 > 0.0) {
        resc = std::abs(psi * fw.psihat[static_cast<std::size_t>(steps)] - inst.c1) /
               inst.c1;
    }
    if (std::max(res1, resc) > 10.0 * opts.tol) {
        std::ostringstream msg;
        msg << "solve: inconsistent discretization (endpoint residual "
            << std::max(res1, resc) << " exceeds " << 10.0 * opts.tol << ")";
        throw std::runtime_error(msg.str());
    }

    BridgeSolution sol;
    sol.potentials = PotentialQuadruple{std::move(fw.phihat), std::move(fw.psihat),
                                        std::move(bw.phi), psi};
    sol.iterations = it;
    sol.hilbert_report = std::move(report);
    sol.log_scale = log_scale;
    return sol;
}

void assemble_posterior(const KilledDiffusionSpec& spec, const KernelBundle& bundle,
                        BridgeSolution& sol) {
    const int n = bundle.grid.n_cells;
    const int nt = bundle.tm.n_nodes();
    const PotentialQuadruple& qd = sol.potentials;

    sol.drift_correction = TimeField(nt, n);
    sol.posterior_killing = TimeField(nt, n);
    sol.marginal_P = TimeField(nt, n);
    sol.coffin_mass.assign(static_cast<std::size_t>(nt), 0.0);

    for (int k = 0; k < nt; ++k) {
        const double t = bundle.tm.t(k);
        const auto phi = qd.phi.row(k);
        const auto phihat = qd.phihat.row(k);
        for (int i = 0; i < n; ++i) {
            // At the terminal node phi = 0 off supp rho1 is the 0/0 support
            // convention; anywhere earlier a vanished phi under positive
            // phihat is a genuine defect.
            if (phi[i] == 0.0 && phihat[i] > 0.0 && k + 1 < nt) {
                throw std::runtime_error(
                    "assemble_posterior: phi vanished where phihat > 0");
            }
            sol.marginal_P(k, i) = phi[i] * phihat[i];

            const double a = spec.a(t, bundle.grid.center(i));
            const double V = spec.killing(t, bundle.grid.center(i));
            sol.posterior_killing(k, i) = phi[i] > 0.0 ? qd.psi * V / phi[i] : 0.0;

            // a * d/dx log phi, central in the interior, one-sided at the
            // walls, skipping zero-phi neighbors (flow is zero there).
            double dlog = 0.0;
            if (phi[i] > 0.0) {
                const int il = i > 0 && phi[i - 1] > 0.0 ? i - 1 : i;
                const int ir = i + 1 < n && phi[i + 1] > 0.0 ? i + 1 : i;
                if (ir > il) {
                    dlog = (std::log(phi[ir]) - std::log(phi[il])) /
                           ((ir - il) * bundle.grid.h);
                }
            }
            sol.drift_correction(k, i) = a * dlog;
        }
        sol.coffin_mass[static_cast<std::size_t>(k)] =
            qd.psi * qd.psihat[static_cast<std::size_t>(k)];
    }
}

EigenvalueCertificate fixed_point_eigenvalue(const BridgeSolution& sol,
                                             const ProblemInstance& inst,
                                             const KernelBundle& bundle) {
    const int steps = bundle.tm.n_steps;
    AugmentedFunction h;
    h.values.assign(sol.potentials.phihat.row(steps).begin(),
                    sol.potentials.phihat.row(steps).end());
    h.coffin_value = sol.potentials.psihat[static_cast<std::size_t>(steps)];

    const AugmentedFunction image = iterate_once(h, inst, bundle).next_state;
    const SupportMask mask = state_mask(inst);

    EigenvalueCertificate cert;
    cert.ratio = sup_norm(image, mask) / sup_norm(h, mask);
    double rmin = std::numeric_limits<double>::infinity();
    double rmax = -rmin;
    for (std::size_t i = 0; i < h.values.size(); ++i) {
        if (!mask.cells[i] || h.values[i] == 0.0) continue;
        const double r = image.values[i] / h.values[i];
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
    }
    if (mask.coffin && h.coffin_value != 0.0) {
        const double r = image.coffin_value / h.coffin_value;
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
    }
    cert.spread = rmax - rmin;
    return cert;
}

StaticFactors static_factors(const BridgeSolution& sol, const ProblemInstance& inst) {
    const int n = sol.potentials.phihat.n_cells;
    const int steps = sol.potentials.phihat.n_times - 1;
    StaticFactors out;
    out.f.values.assign(static_cast<std::size_t>(n), 0.0);
    out.f.coffin_value = 0.0;
    out.g.values.assign(sol.potentials.phi.row(steps).begin(),
                        sol.potentials.phi.row(steps).end());
    out.g.coffin_value = sol.potentials.psi;
    for (int i = 0; i < n; ++i) {
        if (inst.rho0[static_cast<std::size_t>(i)] > 0.0) {
            out.f.values[static_cast<std::size_t>(i)] =
                1.0 / sol.potentials.phi(0, i);
        }
    }
    return out;
}

} // namespace ubridge
