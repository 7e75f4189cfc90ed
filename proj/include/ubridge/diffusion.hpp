#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ubridge/grid.hpp"

namespace ubridge {

/// Coefficient fields of a diffusion with killing:
///   dX = b dt + sigma dW, killed at rate V(t, x).
/// a = sigma^2 must stay strictly positive on the mesh; V must be >= 0.
struct KilledDiffusionSpec {
    std::function<double(double, double)> drift;    // b(t, x)
    std::function<double(double, double)> sigma;    // sigma(t, x) > 0
    std::function<double(double, double)> killing;  // V(t, x) >= 0

    double a(double t, double x) const {
        const double s = sigma(t, x);
        return s * s;
    }

    static KilledDiffusionSpec constant(double b, double sigma, double V);
};

/// Tridiagonal matrix; sub[0] and sup[n-1] are unused.
struct Tridiagonal {
    std::vector<double> sub, diag, sup;

    explicit Tridiagonal(int n = 0)
        : sub(static_cast<std::size_t>(n), 0.0),
          diag(static_cast<std::size_t>(n), 0.0),
          sup(static_cast<std::size_t>(n), 0.0) {}

    int size() const { return static_cast<int>(diag.size()); }

    void apply(std::span<const double> x, std::span<double> y) const;
    void apply_transposed(std::span<const double> x, std::span<double> y) const;
    Tridiagonal transposed() const;
};

/// Discrete generator pair at one time level:
///   forward  L~ on densities:  L~ rho = -D1(b rho) + 1/2 D2(a rho) - V rho
///   adjoint  L  on functions:  the exact matrix transpose of L~
/// Central first differences, second differences, reflecting (no-flux)
/// closure, so the advection-diffusion part conserves mass to roundoff.
struct GeneratorPair {
    Tridiagonal forward;
    Tridiagonal adjoint;
};

GeneratorPair build_generator(const KilledDiffusionSpec& spec, const SpaceGrid& g,
                              double t);

/// Prefactored Crank-Nicolson step over [t_k, t_{k+1}]:
///   rho_{k+1} = (I - dt/2 L~_{k+1})^{-1} (I + dt/2 L~_k) rho_k.
/// The backward operator is the exact transpose, applied with the same
/// factorization, so <F rho, phi> == <rho, F^T phi> to roundoff.
class CrankNicolsonStep {
public:
    CrankNicolsonStep(const Tridiagonal& gen_lo, const Tridiagonal& gen_hi, double dt);

    void forward_apply(std::span<const double> in, std::span<double> out,
                       std::span<double> work) const;
    void adjoint_apply(std::span<const double> in, std::span<double> out,
                       std::span<double> work) const;

    /// Batched forward step on `cols` interleaved vectors (layout
    /// x[i * cols + c]). The independent per-column recurrences pipeline,
    /// which is what makes whole-kernel assembly affordable.
    void forward_apply_block(std::span<const double> in, std::span<double> out,
                             int cols) const;

    int size() const { return explicit_part_.size(); }

private:
    Tridiagonal explicit_part_;          // I + dt/2 L~_k
    std::vector<double> lower_, upper_;  // LU of I - dt/2 L~_{k+1}
    std::vector<double> pivot_, pivot_inv_;
};

struct BundleOptions {
    double tol_mass = 1e-6;  // allowed survival+absorption defect per row of K
    int max_refinements = 6;
    int n_threads = 1;
};

/// Discrete propagators of the killed Fokker-Planck pair, the endpoint
/// kernel K[i][j] ~ q(0, x_i, 1, x_j) h and the absorbed-mass vector
/// r[i] ~ integral of q(0, x_i, t, x) V(t, x) dx dt.
///
/// K and r are accumulated with the same trapezoidal weights the
/// propagation routines use, so sum_j K[i][j] + r[i] = 1 holds to roundoff,
/// not merely to discretization error.
struct KernelBundle {
    SpaceGrid grid;
    TimeMesh tm;                    // effective mesh after any dt refinement
    std::vector<CrankNicolsonStep> steps;  // one entry when time-independent
    TimeField killing_nodes;        // V(t_k, x_i)
    std::vector<double> kernel;     // K, row-major n_cells x n_cells
    std::vector<double> absorbed;   // r
    int refinements = 0;
    double min_kernel_entry = 0.0;
    double max_row_defect = 0.0;

    const CrankNicolsonStep& step_at(int k) const {
        return steps.size() == 1 ? steps.front()
                                 : steps[static_cast<std::size_t>(k)];
    }

    double k_at(int i, int j) const {
        return kernel[static_cast<std::size_t>(i) * grid.n_cells + j];
    }
    std::span<const double> k_row(int i) const {
        return {kernel.data() + static_cast<std::size_t>(i) * grid.n_cells,
                static_cast<std::size_t>(grid.n_cells)};
    }
    std::span<const double> v_node(int k) const { return killing_nodes.row(k); }

    /// K^T v (push a density's cell masses forward to t = 1).
    std::vector<double> kernel_transpose_apply(std::span<const double> v) const;
    /// K v + coffin * r (endpoint backward map of the augmented system).
    std::vector<double> kernel_apply(std::span<const double> v, double coffin) const;
};

KernelBundle build_kernel_bundle(const KilledDiffusionSpec& spec, const SpaceGrid& g,
                                 const TimeMesh& tm, const BundleOptions& opts = {});

struct ForwardSweep {
    TimeField phihat;            // phihat(t_k, .)
    std::vector<double> psihat;  // psihat(t_k), psihat(0) = 0
};

/// Forward half of the Schroedinger system: phihat solves the killed
/// Fokker-Planck equation from phihat0, psihat accumulates the absorbed
/// flux integral of V phihat with trapezoidal weights. Requires
/// phihat0 >= 0.
ForwardSweep propagate_forward(const KernelBundle& bundle,
                               std::span<const double> phihat0);

struct BackwardSweep {
    TimeField phi;  // phi(t_k, .)
};

/// Backward half: phi solves the killed backward equation from phi(1, .)
/// with the Duhamel source psi * V. The t = 0 row satisfies
/// phi(0) = K phi(1) + psi r exactly. Requires phi1 >= 0 and psi >= 0.
BackwardSweep propagate_backward(const KernelBundle& bundle,
                                 std::span<const double> phi1, double psi);

} // namespace ubridge
