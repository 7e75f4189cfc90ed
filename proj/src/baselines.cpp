#include "ubridge/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace ubridge {

namespace {

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

} // namespace

ClassicBridge solve_classic(std::span<const double> rho0,
                            std::span<const double> rho1_unit,
                            const KernelBundle& bundle, double tol, int max_iter) {
    const int n = bundle.grid.n_cells;
    const double h = bundle.grid.h;
    if (std::abs(h * accurate_sum(rho0) - 1.0) > 1e-8 ||
        std::abs(h * accurate_sum(rho1_unit) - 1.0) > 1e-8) {
        throw std::invalid_argument("solve_classic: marginals must have unit mass");
    }

    const SupportMask mask = SupportMask::from_support(rho1_unit, false);

    AugmentedFunction state;
    state.values = bundle.kernel_transpose_apply(rho0);
    state.coffin_value = 0.0;

    auto normalize = [&](AugmentedFunction& x) {
        double m = 0.0;
        for (std::size_t i = 0; i < x.values.size(); ++i) {
            if (mask.cells[i]) m = std::max(m, x.values[i]);
        }
        for (double& v : x.values) v /= m;
    };
    normalize(state);

    bool converged = false;
    int it = 0;
    double dist = std::numeric_limits<double>::infinity();
    for (it = 1; it <= max_iter; ++it) {
        std::vector<double> phi1 = divide_on_support(rho1_unit, state.values);
        std::vector<double> phi0 = bundle.kernel_apply(phi1, 0.0);
        std::vector<double> phihat0 = divide_on_support(rho0, phi0);
        AugmentedFunction next;
        next.values = bundle.kernel_transpose_apply(phihat0);
        next.coffin_value = 0.0;
        normalize(next);
        dist = hilbert_distance(next, state, mask);
        state = std::move(next);
        if (dist < tol) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        std::ostringstream msg;
        msg << "solve_classic: no convergence after " << max_iter
            << " iterations (last Hilbert distance " << dist << ")";
        throw ConvergenceError(msg.str(), max_iter, dist);
    }

    std::vector<double> phi1 = divide_on_support(rho1_unit, state.values);
    BackwardSweep bw = propagate_backward(bundle, phi1, 0.0);
    std::vector<double> phihat0 = divide_on_support(rho0, bw.phi.row(0));
    ForwardSweep fw = propagate_forward(bundle, phihat0);

    ClassicBridge bridge;
    bridge.iterations = it;
    bridge.final_distance = dist;
    const int nt = bundle.tm.n_nodes();
    bridge.flow = TimeField(nt, n);
    for (int k = 0; k < nt; ++k) {
        for (int i = 0; i < n; ++i) {
            bridge.flow(k, i) = bw.phi(k, i) * fw.phihat(k, i);
        }
    }
    bridge.phi = std::move(bw.phi);
    bridge.phihat = std::move(fw.phihat);
    return bridge;
}

ReweightedBridge solve_reweighted(std::span<const double> rho0,
                                  std::span<const double> rho1,
                                  const KernelBundle& bundle, double tol,
                                  int max_iter) {
    std::vector<double> rho1_hat(rho1.begin(), rho1.end());
    normalize_mass(rho1_hat, bundle.grid, 1.0);
    ClassicBridge core = solve_classic(rho0, rho1_hat, bundle, tol, max_iter);

    ReweightedBridge out;
    out.phi = std::move(core.phi);
    out.phihat = std::move(core.phihat);
    out.flow = std::move(core.flow);
    out.rho1_normalized = std::move(rho1_hat);
    out.iterations = core.iterations;
    return out;
}

std::vector<double> build_prior_joint(std::span<const double> rho0,
                                      const KernelBundle& bundle) {
    const int n = bundle.grid.n_cells;
    const double h = bundle.grid.h;
    std::vector<double> joint(static_cast<std::size_t>(n + 1) * (n + 1), 0.0);
    for (int i = 0; i < n; ++i) {
        const double mass0 = rho0[i] * h;
        const auto row = bundle.k_row(i);
        for (int j = 0; j < n; ++j) {
            joint[static_cast<std::size_t>(i) * (n + 1) + j] = mass0 * row[j];
        }
        joint[static_cast<std::size_t>(i) * (n + 1) + n] = mass0 * bundle.absorbed[i];
    }
    return joint;
}

StaticCoupling static_oracle(const ProblemInstance& inst, const KernelBundle& bundle,
                             double tol, int max_iter) {
    const int n = bundle.grid.n_cells;
    if (n > 64) {
        throw std::invalid_argument("static_oracle: n_cells must be <= 64");
    }
    const double h = bundle.grid.h;

    // Feasibility: the coffin column must be reachable.
    if (inst.c1 > 0.0) {
        double reachable = 0.0;
        for (int i = 0; i < n; ++i) reachable += inst.rho0[i] * h * bundle.absorbed[i];
        if (reachable <= 0.0) {
            throw std::runtime_error(
                "static_oracle: target coffin mass exceeds reachable absorbed mass");
        }
    }

    StaticCoupling out;
    out.n = n;
    out.prior = build_prior_joint(inst.rho0, bundle);
    out.pi = out.prior;

    const int m = n + 1;
    std::vector<double> row_target(static_cast<std::size_t>(m), 0.0);
    std::vector<double> col_target(static_cast<std::size_t>(m), 0.0);
    for (int i = 0; i < n; ++i) row_target[i] = inst.rho0[i] * h;
    row_target[n] = 0.0;
    for (int j = 0; j < n; ++j) col_target[j] = inst.rho1[j] * h;
    col_target[n] = inst.c1;

    auto residual = [&]() {
        long double worst = 0.0L;
        for (int i = 0; i < m; ++i) {
            long double rs = 0.0L;
            for (int j = 0; j < m; ++j) rs += out.pi[static_cast<std::size_t>(i) * m + j];
            worst = std::max(worst, std::fabs(rs - static_cast<long double>(row_target[i])));
        }
        for (int j = 0; j < m; ++j) {
            long double cs = 0.0L;
            for (int i = 0; i < m; ++i) cs += out.pi[static_cast<std::size_t>(i) * m + j];
            worst = std::max(worst, std::fabs(cs - static_cast<long double>(col_target[j])));
        }
        return static_cast<double>(worst);
    };

    bool converged = false;
    int it = 0;
    for (it = 1; it <= max_iter; ++it) {
        // Row fit.
        for (int i = 0; i < m; ++i) {
            long double rs = 0.0L;
            for (int j = 0; j < m; ++j) rs += out.pi[static_cast<std::size_t>(i) * m + j];
            if (rs > 0.0L) {
                const long double scale = row_target[i] / rs;
                for (int j = 0; j < m; ++j) {
                    out.pi[static_cast<std::size_t>(i) * m + j] = static_cast<double>(
                        out.pi[static_cast<std::size_t>(i) * m + j] * scale);
                }
            } else if (row_target[i] > 0.0) {
                throw std::runtime_error("static_oracle: infeasible row marginal");
            }
        }
        // Column fit.
        for (int j = 0; j < m; ++j) {
            long double cs = 0.0L;
            for (int i = 0; i < m; ++i) cs += out.pi[static_cast<std::size_t>(i) * m + j];
            if (cs > 0.0L) {
                const long double scale = col_target[j] / cs;
                for (int i = 0; i < m; ++i) {
                    out.pi[static_cast<std::size_t>(i) * m + j] = static_cast<double>(
                        out.pi[static_cast<std::size_t>(i) * m + j] * scale);
                }
            } else if (col_target[j] > 0.0) {
                throw std::runtime_error("static_oracle: infeasible column marginal "
                                         "(coffin mass unreachable)");
            }
        }
        if (residual() < tol) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        throw ConvergenceError("static_oracle: IPF did not reach tolerance", max_iter,
                               residual());
    }
    out.iterations = it;
    out.entropy = relative_entropy(out.pi, out.prior);
    return out;
}

std::vector<double> coupling_from_factors(const StaticFactors& factors,
                                          std::span<const double> prior_joint,
                                          int n) {
    const int m = n + 1;
    std::vector<double> pi(static_cast<std::size_t>(m) * m, 0.0);
    for (int i = 0; i < m; ++i) {
        const double fi = i < n ? factors.f.values[i] : factors.f.coffin_value;
        for (int j = 0; j < m; ++j) {
            const double gj = j < n ? factors.g.values[j] : factors.g.coffin_value;
            pi[static_cast<std::size_t>(i) * m + j] =
                fi * gj * prior_joint[static_cast<std::size_t>(i) * m + j];
        }
    }
    return pi;
}

double relative_entropy(std::span<const double> pi, std::span<const double> prior) {
    long double acc = 0.0L;
    for (std::size_t k = 0; k < pi.size(); ++k) {
        if (pi[k] > 0.0) {
            if (!(prior[k] > 0.0)) {
                throw std::invalid_argument(
                    "relative_entropy: pi not absolutely continuous w.r.t. prior");
            }
            acc += static_cast<long double>(pi[k]) * std::log(pi[k] / prior[k]);
        }
    }
    return static_cast<double>(acc);
}

} // namespace ubridge
