#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "ubridge/diffusion.hpp"
#include "ubridge/grid.hpp"
#include "ubridge/solver.hpp"

namespace ubridge {

/// Space-time quadrature of the control cost
///   integral of 1/2 |u|^2 P + (alpha log alpha - alpha + 1) V P,
/// with u = sigma grad log phi and alpha = psi / phi. Both terms are >= 0;
/// the value is 0 exactly when the posterior equals the prior.
struct CostReport {
    double kinetic = 0.0;
    double killing_entropy = 0.0;
    double total = 0.0;
};

CostReport evaluate_cost(const BridgeSolution& sol, const KilledDiffusionSpec& spec,
                         const KernelBundle& bundle);

/// P-weighted L2 norm of the discrete residual of the controlled
/// Fokker-Planck equation for the flow P = phi phihat, measured with central
/// stencils on the interior of the space-time mesh.
double fokker_planck_residual(const BridgeSolution& sol,
                              const KilledDiffusionSpec& spec,
                              const KernelBundle& bundle);

/// P-weighted L2 norm of the residual of the stationarity (HJB) equation
///   dt lambda + b grad lambda + 1/2 a lap lambda + 1/2 a |grad lambda|^2
///     - V (1 - exp(-lambda)) = 0
/// for lambda = log(phi / psi). Throws when psi = 0 (s = 1); use
/// hjb_residual_balanced for the no-killing-update branch.
double hjb_residual(const BridgeSolution& sol, const KilledDiffusionSpec& spec,
                    const KernelBundle& bundle);

/// Balanced branch without the V (1 - exp(-lambda)) term, for lambda =
/// log phi; weights from the given flow.
double hjb_residual_balanced(const TimeField& phi, const TimeField& flow,
                             const KilledDiffusionSpec& spec,
                             const KernelBundle& bundle);

/// Particle system from an Euler-Maruyama discretization with reflecting
/// walls and exponential per-step killing. Positions are stored only at the
/// requested snapshot nodes; aliveness is encoded by the first dead node per
/// particle, which makes dead-stay-dead structural.
struct ParticleEnsemble {
    int n_particles = 0;
    std::uint64_t seed = 0;
    std::vector<int> death_node;  // first node index at which the particle is dead
    std::vector<int> alive_count; // per node
    std::map<int, std::vector<double>> snapshots;  // node -> positions (all particles)

    bool alive(int node, int particle) const {
        return death_node[static_cast<std::size_t>(particle)] > node;
    }
    double alive_fraction(int node) const {
        return static_cast<double>(alive_count[static_cast<std::size_t>(node)]) /
               n_particles;
    }
};

/// Simulates the prior killed diffusion from rho0. Deterministic given the
/// seed; per-particle RNG streams, so any particle-parallel execution
/// matches the serial one bit for bit. time_stride > 1 takes Euler steps
/// over that many mesh intervals at once (fields sampled at the stride
/// nodes); it must divide n_steps, and snapshot nodes must be multiples
/// of it.
ParticleEnsemble simulate_prior(const KilledDiffusionSpec& spec, const SpaceGrid& g,
                                const TimeMesh& tm, std::span<const double> rho0,
                                int n_particles, std::uint64_t seed,
                                std::span<const int> snapshot_nodes,
                                int time_stride = 1);

/// Simulates the posterior process: drift b + a grad log phi and killing
/// rate psi V / phi, interpolated linearly in x and piecewise-constant in t.
ParticleEnsemble simulate_posterior(const BridgeSolution& sol,
                                    const KilledDiffusionSpec& spec,
                                    const KernelBundle& bundle,
                                    std::span<const double> rho0, int n_particles,
                                    std::uint64_t seed,
                                    std::span<const int> snapshot_nodes,
                                    int time_stride = 1);

/// Total-variation distance between the alive-particle histogram at a
/// snapshot node and the computed flow row, both normalized, aggregated to
/// n_bins equal bins.
double tv_distance(const ParticleEnsemble& ensemble, int node,
                   std::span<const double> flow_row, const SpaceGrid& g, int n_bins);

} // namespace ubridge
