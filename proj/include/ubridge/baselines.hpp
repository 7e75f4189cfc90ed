#pragma once

#include <span>
#include <vector>

#include "ubridge/diffusion.hpp"
#include "ubridge/grid.hpp"
#include "ubridge/solver.hpp"

namespace ubridge {

/// Balanced two-marginal bridge: potentials and the probability flow
/// P_t = phi phihat, which conserves unit mass at every time.
struct ClassicBridge {
    TimeField phi;
    TimeField phihat;
    TimeField flow;
    int iterations = 0;
    double final_distance = 0.0;
};

/// Standard two-sided diagonal scaling against the bundle's endpoint kernel
/// (with or without killing folded in, per the caller's bundle), then flow
/// assembly through the bundle's propagators without a coffin source.
/// Both marginals must carry unit mass.
ClassicBridge solve_classic(std::span<const double> rho0,
                            std::span<const double> rho1_unit,
                            const KernelBundle& bundle, double tol = 1e-10,
                            int max_iter = 100000);

/// Bridge over the Feynman-Kac reweighted (survivor-only) prior: the target
/// is renormalized to a probability and the balanced system runs against the
/// killed kernel. The flow stays a probability at all times.
struct ReweightedBridge {
    TimeField phi;
    TimeField phihat;
    TimeField flow;
    std::vector<double> rho1_normalized;
    int iterations = 0;
};

ReweightedBridge solve_reweighted(std::span<const double> rho0,
                                  std::span<const double> rho1,
                                  const KernelBundle& bundle, double tol = 1e-10,
                                  int max_iter = 100000);

/// Static coupling over the (n_cells + 1)-point augmented state space; index
/// n_cells is the coffin. Entries are joint masses.
struct StaticCoupling {
    int n = 0;  // spatial cells; matrix is (n+1) x (n+1)
    std::vector<double> pi;
    std::vector<double> prior;  // R01
    double entropy = 0.0;       // H(pi | R01)
    int iterations = 0;

    double at(int i, int j) const {
        return pi[static_cast<std::size_t>(i) * (n + 1) + j];
    }
    double prior_at(int i, int j) const {
        return prior[static_cast<std::size_t>(i) * (n + 1) + j];
    }
};

/// Augmented prior joint R01: R01[i][j] = rho0_i h K[i][j],
/// R01[i][coffin] = rho0_i h r[i], coffin row zero.
std::vector<double> build_prior_joint(std::span<const double> rho0,
                                      const KernelBundle& bundle);

/// Desk-scale brute force: iterative proportional fitting of the augmented
/// joint to the marginals (p0, p1), long-double accumulation. Requires
/// n_cells <= 64.
StaticCoupling static_oracle(const ProblemInstance& inst, const KernelBundle& bundle,
                             double tol = 1e-12, int max_iter = 200000);

/// Coupling f(x) g(y) R01 assembled from the dynamic solution's endpoint
/// factors, on the same augmented index space as the oracle.
std::vector<double> coupling_from_factors(const StaticFactors& factors,
                                          std::span<const double> prior_joint, int n);

/// H(pi | prior) with masses; 0 log 0 = 0. Requires pi << prior.
double relative_entropy(std::span<const double> pi, std::span<const double> prior);

} // namespace ubridge
