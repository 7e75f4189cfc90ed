#include "ubridge/validation.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace ubridge {

namespace {

double node_weight(int k, int n_steps) {
    return (k == 0 || k == n_steps) ? 0.5 : 1.0;
}

} // namespace

CostReport evaluate_cost(const BridgeSolution& sol, const KilledDiffusionSpec& spec,
                         const KernelBundle& bundle) {
    const int n = bundle.grid.n_cells;
    const int steps = bundle.tm.n_steps;
    const double h = bundle.grid.h;
    const double dt = bundle.tm.dt;

    long double kinetic = 0.0L;
    long double killing = 0.0L;
    for (int k = 0; k <= steps; ++k) {
        const double t = bundle.tm.t(k);
        const double wt = node_weight(k, steps) * dt;
        for (int i = 0; i < n; ++i) {
            const double P = sol.marginal_P(k, i);
            if (P <= 0.0) continue;
            const double x = bundle.grid.center(i);
            const double a = spec.a(t, x);
            const double V = spec.killing(t, x);
            const double dc = sol.drift_correction(k, i);
            kinetic += static_cast<long double>(wt) * h * (0.5 * dc * dc / a) * P;

            const double phi = sol.potentials.phi(k, i);
            const double alpha = phi > 0.0 ? sol.potentials.psi / phi : 0.0;
            const double integrand = xlogx(alpha) - alpha + 1.0;
            killing += static_cast<long double>(wt) * h * integrand * V * P;
        }
    }
    CostReport report;
    report.kinetic = static_cast<double>(kinetic);
    report.killing_entropy = static_cast<double>(killing);
    report.total = report.kinetic + report.killing_entropy;
    return report;
}

double fokker_planck_residual(const BridgeSolution& sol,
                              const KilledDiffusionSpec& spec,
                              const KernelBundle& bundle) {
    const int n = bundle.grid.n_cells;
    const int steps = bundle.tm.n_steps;
    const double h = bundle.grid.h;
    const double dt = bundle.tm.dt;

    long double num = 0.0L;
    long double den = 0.0L;
    std::vector<double> flux(static_cast<std::size_t>(n));
    std::vector<double> aP(static_cast<std::size_t>(n));
    for (int k = 1; k < steps; ++k) {
        const double t = bundle.tm.t(k);
        for (int i = 0; i < n; ++i) {
            const double x = bundle.grid.center(i);
            const double b = spec.drift(t, x);
            flux[static_cast<std::size_t>(i)] =
                (b + sol.drift_correction(k, i)) * sol.marginal_P(k, i);
            aP[static_cast<std::size_t>(i)] = spec.a(t, x) * sol.marginal_P(k, i);
        }
        for (int i = 1; i + 1 < n; ++i) {
            const double P = sol.marginal_P(k, i);
            if (P <= 0.0) continue;
            const double dPdt =
                (sol.marginal_P(k + 1, i) - sol.marginal_P(k - 1, i)) / (2.0 * dt);
            const double div_flux = (flux[static_cast<std::size_t>(i + 1)] -
                                     flux[static_cast<std::size_t>(i - 1)]) /
                                    (2.0 * h);
            const double lap = (aP[static_cast<std::size_t>(i + 1)] -
                                2.0 * aP[static_cast<std::size_t>(i)] +
                                aP[static_cast<std::size_t>(i - 1)]) /
                               (h * h);
            const double res =
                dPdt + div_flux - 0.5 * lap + sol.posterior_killing(k, i) * P;
            num += static_cast<long double>(res) * res * P * h * dt;
            den += static_cast<long double>(P) * h * dt;
        }
    }
    if (den <= 0.0L) return 0.0;
    return std::sqrt(static_cast<double>(num / den));
}

namespace {

// Shared interior stencil for both HJB branches: lambda per (k, i) plus an
// additive killing term.
template <typename Lambda, typename KillTerm>
double hjb_core(const TimeField& weights, const KilledDiffusionSpec& spec,
                const KernelBundle& bundle, Lambda&& lambda, KillTerm&& kill) {
    const int n = bundle.grid.n_cells;
    const int steps = bundle.tm.n_steps;
    const double h = bundle.grid.h;
    const double dt = bundle.tm.dt;

    long double num = 0.0L;
    long double den = 0.0L;
    for (int k = 1; k < steps; ++k) {
        const double t = bundle.tm.t(k);
        for (int i = 1; i + 1 < n; ++i) {
            const double P = weights(k, i);
            if (P <= 0.0) continue;
            const double x = bundle.grid.center(i);
            const double lc = lambda(k, i);
            const double lt = (lambda(k + 1, i) - lambda(k - 1, i)) / (2.0 * dt);
            const double lx = (lambda(k, i + 1) - lambda(k, i - 1)) / (2.0 * h);
            const double lxx =
                (lambda(k, i + 1) - 2.0 * lc + lambda(k, i - 1)) / (h * h);
            const double a = spec.a(t, x);
            const double b = spec.drift(t, x);
            const double res =
                lt + b * lx + 0.5 * a * lxx + 0.5 * a * lx * lx + kill(k, i, lc);
            num += static_cast<long double>(res) * res * P * h * dt;
            den += static_cast<long double>(P) * h * dt;
        }
    }
    if (den <= 0.0L) return 0.0;
    return std::sqrt(static_cast<double>(num / den));
}

} // namespace

double hjb_residual(const BridgeSolution& sol, const KilledDiffusionSpec& spec,
                    const KernelBundle& bundle) {
    if (!(sol.potentials.psi > 0.0)) {
        throw std::invalid_argument("hjb_residual: lambda undefined (psi = 0)");
    }
    const double log_psi = std::log(sol.potentials.psi);
    auto lambda = [&](int k, int i) {
        return std::log(sol.potentials.phi(k, i)) - log_psi;
    };
    auto kill = [&](int k, int i, double lc) {
        const double V = spec.killing(bundle.tm.t(k), bundle.grid.center(i));
        return -V * (1.0 - std::exp(-lc));
    };
    return hjb_core(sol.marginal_P, spec, bundle, lambda, kill);
}

double hjb_residual_balanced(const TimeField& phi, const TimeField& flow,
                             const KilledDiffusionSpec& spec,
                             const KernelBundle& bundle) {
    auto lambda = [&](int k, int i) { return std::log(phi(k, i)); };
    auto kill = [](int, int, double) { return 0.0; };
    return hjb_core(flow, spec, bundle, lambda, kill);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double reflect_into(double x, double lo, double hi) {
    const double span = hi - lo;
    while (x < lo || x > hi) {
        if (x < lo) x = 2.0 * lo - x;
        if (x > hi) x = 2.0 * hi - x;
        if (x < lo - 2.0 * span || x > hi + 2.0 * span) {
            // huge excursion (pathological drift); wrap deterministically
            x = lo + std::fmod(std::abs(x - lo), span);
        }
    }
    return x;
}

// Position from the inverse CDF of the cellwise-constant density.
double sample_initial(const SpaceGrid& g, double u, std::span<const double> cdf) {
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const int cell = std::min<int>(static_cast<int>(it - cdf.begin()), g.n_cells - 1);
    const double lo_cdf = cell > 0 ? cdf[static_cast<std::size_t>(cell) - 1] : 0.0;
    const double p = cdf[static_cast<std::size_t>(cell)] - lo_cdf;
    const double frac = p > 0.0 ? (u - lo_cdf) / p : 0.5;
    return g.lo + (cell + frac) * g.h;
}

// drift(k, x), sigma(k, x), kill(k, x): the step over [node, node + stride]
// uses the fields frozen at the starting node (piecewise-constant in time).
template <typename DriftF, typename SigmaF, typename KillF>
ParticleEnsemble run_particles(const SpaceGrid& g, const TimeMesh& tm,
                               std::span<const double> rho0, int n_particles,
                               std::uint64_t seed,
                               std::span<const int> snapshot_nodes, int stride,
                               DriftF&& drift, SigmaF&& sigma, KillF&& kill) {
    if (n_particles < 1) {
        throw std::invalid_argument("simulate: n_particles must be >= 1");
    }
    if (stride < 1 || tm.n_steps % stride != 0) {
        throw std::invalid_argument("simulate: time_stride must divide n_steps");
    }
    for (int node : snapshot_nodes) {
        if (node % stride != 0) {
            throw std::invalid_argument(
                "simulate: snapshot nodes must be multiples of time_stride");
        }
    }
    const int steps = tm.n_steps;
    const double dt = tm.dt * stride;
    const double sqrt_dt = std::sqrt(dt);

    ParticleEnsemble ens;
    ens.n_particles = n_particles;
    ens.seed = seed;
    ens.death_node.assign(static_cast<std::size_t>(n_particles), steps + 1);
    ens.alive_count.assign(static_cast<std::size_t>(steps + 1), 0);
    for (int node : snapshot_nodes) {
        ens.snapshots[node] =
            std::vector<double>(static_cast<std::size_t>(n_particles), 0.0);
    }

    std::vector<double> cdf(rho0.size());
    long double acc = 0.0L;
    long double total = 0.0L;
    for (double v : rho0) total += v;
    for (std::size_t i = 0; i < rho0.size(); ++i) {
        acc += rho0[i];
        cdf[i] = static_cast<double>(acc / total);
    }

    std::vector<int> deaths_per_node(static_cast<std::size_t>(steps + 1), 0);
    for (int p = 0; p < n_particles; ++p) {
        std::mt19937_64 rng(splitmix64(
            seed ^ (0x517cc1b727220a95ULL * (static_cast<std::uint64_t>(p) + 1))));
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);

        double x = sample_initial(g, unif(rng), cdf);
        int death = steps + 1;
        for (int k = 0; k < steps; k += stride) {
            if (auto snap = ens.snapshots.find(k); snap != ens.snapshots.end()) {
                snap->second[static_cast<std::size_t>(p)] = x;
            }
            const double rate = std::max(kill(k, x), 0.0);
            if (unif(rng) < 1.0 - std::exp(-rate * dt)) {
                death = k + stride;
                break;
            }
            x += drift(k, x) * dt + sigma(k, x) * sqrt_dt * normal(rng);
            x = reflect_into(x, g.lo, g.hi);
        }
        if (death > steps) {
            if (auto snap = ens.snapshots.find(steps); snap != ens.snapshots.end()) {
                snap->second[static_cast<std::size_t>(p)] = x;
            }
        } else {
            deaths_per_node[static_cast<std::size_t>(death)] += 1;
        }
        ens.death_node[static_cast<std::size_t>(p)] = death;
    }

    int alive = n_particles;
    for (int k = 0; k <= steps; ++k) {
        alive -= deaths_per_node[static_cast<std::size_t>(k)];
        ens.alive_count[static_cast<std::size_t>(k)] = alive;
    }
    return ens;
}

} // namespace

ParticleEnsemble simulate_prior(const KilledDiffusionSpec& spec, const SpaceGrid& g,
                                const TimeMesh& tm, std::span<const double> rho0,
                                int n_particles, std::uint64_t seed,
                                std::span<const int> snapshot_nodes,
                                int time_stride) {
    auto drift = [&](int k, double x) { return spec.drift(tm.t(k), x); };
    auto sigma = [&](int k, double x) { return spec.sigma(tm.t(k), x); };
    auto kill = [&](int k, double x) { return spec.killing(tm.t(k), x); };
    return run_particles(g, tm, rho0, n_particles, seed, snapshot_nodes,
                         time_stride, drift, sigma, kill);
}

ParticleEnsemble simulate_posterior(const BridgeSolution& sol,
                                    const KilledDiffusionSpec& spec,
                                    const KernelBundle& bundle,
                                    std::span<const double> rho0, int n_particles,
                                    std::uint64_t seed,
                                    std::span<const int> snapshot_nodes,
                                    int time_stride) {
    const SpaceGrid& g = bundle.grid;
    const TimeMesh& tm = bundle.tm;

    auto interp = [&](const TimeField& field, int k, double x) {
        const auto row = field.row(k);
        const double pos = (x - g.lo) / g.h - 0.5;
        if (pos <= 0.0) return row[0];
        if (pos >= g.n_cells - 1) return row[static_cast<std::size_t>(g.n_cells) - 1];
        const int i = static_cast<int>(pos);
        const double w = pos - i;
        return (1.0 - w) * row[static_cast<std::size_t>(i)] +
               w * row[static_cast<std::size_t>(i) + 1];
    };

    auto drift = [&](int k, double x) {
        return spec.drift(tm.t(k), x) + interp(sol.drift_correction, k, x);
    };
    auto sigma = [&](int k, double x) { return spec.sigma(tm.t(k), x); };
    auto kill = [&](int k, double x) { return interp(sol.posterior_killing, k, x); };
    return run_particles(g, tm, rho0, n_particles, seed, snapshot_nodes,
                         time_stride, drift, sigma, kill);
}

double tv_distance(const ParticleEnsemble& ensemble, int node,
                   std::span<const double> flow_row, const SpaceGrid& g, int n_bins) {
    const auto snap = ensemble.snapshots.find(node);
    if (snap == ensemble.snapshots.end()) {
        throw std::invalid_argument("tv_distance: node was not snapshotted");
    }
    if (n_bins < 1 || g.n_cells % n_bins != 0) {
        throw std::invalid_argument("tv_distance: n_bins must divide n_cells");
    }

    std::vector<double> empirical(static_cast<std::size_t>(n_bins), 0.0);
    long double alive = 0.0L;
    const double bin_width = (g.hi - g.lo) / n_bins;
    for (int p = 0; p < ensemble.n_particles; ++p) {
        if (!ensemble.alive(node, p)) continue;
        const double x = snap->second[static_cast<std::size_t>(p)];
        int b = static_cast<int>((x - g.lo) / bin_width);
        b = std::clamp(b, 0, n_bins - 1);
        empirical[static_cast<std::size_t>(b)] += 1.0;
        alive += 1.0L;
    }
    if (alive == 0.0L) {
        throw std::invalid_argument("tv_distance: no alive particles at node");
    }
    for (double& v : empirical) v = static_cast<double>(v / alive);

    std::vector<double> model(static_cast<std::size_t>(n_bins), 0.0);
    const int per_bin = g.n_cells / n_bins;
    long double total = 0.0L;
    for (int i = 0; i < g.n_cells; ++i) {
        model[static_cast<std::size_t>(i / per_bin)] += flow_row[i];
        total += flow_row[i];
    }
    for (double& v : model) v = static_cast<double>(v / total);

    long double tv = 0.0L;
    for (int b = 0; b < n_bins; ++b) {
        tv += std::abs(empirical[static_cast<std::size_t>(b)] -
                       model[static_cast<std::size_t>(b)]);
    }
    return 0.5 * static_cast<double>(tv);
}

} // namespace ubridge
