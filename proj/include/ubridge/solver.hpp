#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "ubridge/diffusion.hpp"
#include "ubridge/grid.hpp"
#include "ubridge/hilbert.hpp"

namespace ubridge {

/// Thrown when the fixed-point iteration runs out of iterations.
class ConvergenceError : public std::runtime_error {
public:
    ConvergenceError(const std::string& what, int iterations, double last_distance)
        : std::runtime_error(what), iterations(iterations),
          last_distance(last_distance) {}

    int iterations;
    double last_distance;
};

/// One unbalanced bridge problem: endpoint data on a grid. rho0 must be a
/// probability density (h * sum = 1); rho1 carries the surviving mass
/// s = h * sum(rho1) in (0, 1], and c1 = 1 - s is the prescribed terminal
/// coffin mass.
struct ProblemInstance {
    std::vector<double> rho0;
    std::vector<double> rho1;
    double s = 1.0;
    double c1 = 0.0;

    static ProblemInstance make(const SpaceGrid& g, std::vector<double> rho0,
                                std::vector<double> rho1);
};

/// The four potentials of the generalized Schroedinger system.
struct PotentialQuadruple {
    TimeField phihat;
    std::vector<double> psihat;
    TimeField phi;
    double psi = 0.0;
};

/// Endpoint factors of the static coupling pi = f(x) g(y) R01(x, y).
struct StaticFactors {
    AugmentedFunction f;  // 1/phi(0, .) on supp rho0, 0 elsewhere; coffin 0
    AugmentedFunction g;  // phi(1, .); coffin psi
};

struct BridgeSolution {
    PotentialQuadruple potentials;
    TimeField drift_correction;   // a * grad log phi
    TimeField posterior_killing;  // psi V / phi
    TimeField marginal_P;         // phi * phihat
    std::vector<double> coffin_mass;  // psi * psihat
    int iterations = 0;
    HilbertReport hilbert_report;
    double log_scale = 0.0;  // accumulated log of per-sweep renormalizations
};

/// Which value the backward half-sweep reports as the coffin coordinate of
/// its output. The anchored variant pins it to phi(0, z) at a fixed support
/// cell z; the composed map is unchanged because the forward half-sweep
/// never reads it.
enum class CoffinRule { standard, anchored };

struct SweepResult {
    AugmentedFunction next_state;  // (phihat(1, .) | psihat(1))
    PotentialQuadruple potentials;
    double coffin_out = 0.0;       // the coffin value reported after E2/E2'
};

/// One full cycle E4 . E3 . E2 . E1 of the fixed-point map, realized by an
/// exact backward and forward propagation sweep. No renormalization.
SweepResult iterate_once(const AugmentedFunction& state, const ProblemInstance& inst,
                         const KernelBundle& bundle,
                         CoffinRule rule = CoffinRule::standard, int anchor_cell = 0);

struct SolveOptions {
    double tol = 1e-9;
    int max_iter = 5000;
    double init_scale = 1.0;  // initial phi(0, .) = init_scale everywhere
    bool use_kernel_map = true;  // iterate on the cached endpoint kernel
};

/// Runs the contractive fixed-point iteration to tolerance tol in the
/// Hilbert metric on the (phihat(1,.) | psihat(1)) state, then assembles the
/// posterior fields from one coherent pair of sweeps. Verifies the endpoint
/// couplings to 10 * tol.
BridgeSolution solve(const ProblemInstance& inst, const KernelBundle& bundle,
                     const SolveOptions& opts = {});

/// Fills the derived fields (drift correction, posterior killing, marginal
/// flow, coffin mass) of a solution from its potentials.
void assemble_posterior(const KilledDiffusionSpec& spec, const KernelBundle& bundle,
                        BridgeSolution& sol);

struct EigenvalueCertificate {
    double ratio = 0.0;   // |C(h)| / |h| in the augmented sup norm
    double spread = 0.0;  // max - min of the componentwise ratios C(h)/h
};

/// Applies the composed map to the solution's endpoint state. At the true
/// fixed point the ratio is 1 and the spread is 0.
EigenvalueCertificate fixed_point_eigenvalue(const BridgeSolution& sol,
                                             const ProblemInstance& inst,
                                             const KernelBundle& bundle);

StaticFactors static_factors(const BridgeSolution& sol, const ProblemInstance& inst);

/// Convergence mask of the iteration state: supp rho1 plus the coffin
/// coordinate when c1 > 0.
SupportMask state_mask(const ProblemInstance& inst);

} // namespace ubridge
