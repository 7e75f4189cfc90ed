#include "ubridge/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace ubridge {

KilledDiffusionSpec KilledDiffusionSpec::constant(double b, double sigma, double V) {
    KilledDiffusionSpec s;
    s.drift = [b](double, double) { return b; };
    s.sigma = [sigma](double, double) { return sigma; };
    s.killing = [V](double, double) { return V; };
    return s;
}

void Tridiagonal::apply(std::span<const double> x, std::span<double> y) const {
    const int n = size();
    for (int i = 0; i < n; ++i) {
        double acc = diag[i] * x[i];
        if (i > 0) acc += sub[i] * x[i - 1];
        if (i + 1 < n) acc += sup[i] * x[i + 1];
        y[i] = acc;
    }
}

void Tridiagonal::apply_transposed(std::span<const double> x, std::span<double> y) const {
    const int n = size();
    for (int i = 0; i < n; ++i) {
        double acc = diag[i] * x[i];
        if (i > 0) acc += sup[i - 1] * x[i - 1];
        if (i + 1 < n) acc += sub[i + 1] * x[i + 1];
        y[i] = acc;
    }
}

Tridiagonal Tridiagonal::transposed() const {
    const int n = size();
    Tridiagonal t(n);
    t.diag = diag;
    for (int i = 0; i + 1 < n; ++i) {
        t.sup[i] = sub[i + 1];
        t.sub[i + 1] = sup[i];
    }
    return t;
}

GeneratorPair build_generator(const KilledDiffusionSpec& spec, const SpaceGrid& g,
                              double t) {
    const int n = g.n_cells;
    const double h = g.h;
    std::vector<double> a(n), b(n), V(n);
    for (int i = 0; i < n; ++i) {
        const double x = g.center(i);
        a[i] = spec.a(t, x);
        b[i] = spec.drift(t, x);
        V[i] = spec.killing(t, x);
        if (!(a[i] > 0.0)) {
            throw std::invalid_argument("build_generator: a(t,x) must be positive "
                                        "(ellipticity violated)");
        }
        if (V[i] < 0.0) {
            throw std::invalid_argument("build_generator: killing rate must be >= 0");
        }
    }

    Tridiagonal L(n);
    const double idh2 = 1.0 / (2.0 * h * h);
    const double idh = 1.0 / (2.0 * h);

    // 1/2 D2(a rho), reflecting closure
    for (int i = 0; i < n; ++i) {
        if (i > 0) L.sub[i] += a[i - 1] * idh2;
        if (i + 1 < n) L.sup[i] += a[i + 1] * idh2;
        const bool interior = (i > 0 && i + 1 < n);
        L.diag[i] += (interior ? -2.0 : -1.0) * a[i] * idh2;
    }

    // -D1(b rho) in flux form with zero boundary flux; central in the interior
    for (int i = 0; i < n; ++i) {
        if (i + 1 < n) {  // outgoing flux through the right face
            L.diag[i] -= b[i] * idh;
            L.sup[i] -= b[i + 1] * idh;
        }
        if (i > 0) {  // incoming flux through the left face
            L.diag[i] += b[i] * idh;
            L.sub[i] += b[i - 1] * idh;
        }
    }

    for (int i = 0; i < n; ++i) L.diag[i] -= V[i];

    GeneratorPair pair{L, L.transposed()};
    return pair;
}

CrankNicolsonStep::CrankNicolsonStep(const Tridiagonal& gen_lo,
                                     const Tridiagonal& gen_hi, double dt)
    : explicit_part_(gen_lo.size()) {
    const int n = gen_lo.size();
    const double half = 0.5 * dt;

    for (int i = 0; i < n; ++i) {
        explicit_part_.sub[i] = half * gen_lo.sub[i];
        explicit_part_.diag[i] = 1.0 + half * gen_lo.diag[i];
        explicit_part_.sup[i] = half * gen_lo.sup[i];
    }

    // Thomas factorization of I - dt/2 L_{k+1}
    std::vector<double> isub(n), idiag(n), isup(n);
    for (int i = 0; i < n; ++i) {
        isub[i] = -half * gen_hi.sub[i];
        idiag[i] = 1.0 - half * gen_hi.diag[i];
        isup[i] = -half * gen_hi.sup[i];
    }
    lower_.assign(n, 0.0);
    pivot_.assign(n, 0.0);
    pivot_inv_.assign(n, 0.0);
    upper_ = isup;
    pivot_[0] = idiag[0];
    for (int i = 1; i < n; ++i) {
        lower_[i] = isub[i] / pivot_[i - 1];
        pivot_[i] = idiag[i] - lower_[i] * isup[i - 1];
    }
    for (int i = 0; i < n; ++i) {
        if (pivot_[i] == 0.0 || !std::isfinite(pivot_[i])) {
            throw std::runtime_error("CrankNicolsonStep: singular implicit matrix");
        }
        pivot_inv_[i] = 1.0 / pivot_[i];
    }
}

void CrankNicolsonStep::forward_apply(std::span<const double> in, std::span<double> out,
                                      std::span<double> work) const {
    const int n = size();
    explicit_part_.apply(in, work);
    // solve LU x = work
    out[0] = work[0];
    for (int i = 1; i < n; ++i) out[i] = work[i] - lower_[i] * out[i - 1];
    out[n - 1] *= pivot_inv_[n - 1];
    for (int i = n - 2; i >= 0; --i) {
        out[i] = (out[i] - upper_[i] * out[i + 1]) * pivot_inv_[i];
    }
}

void CrankNicolsonStep::forward_apply_block(std::span<const double> in,
                                            std::span<double> out, int cols) const {
    const int n = size();
    const auto& e = explicit_part_;
    // explicit half-step straight into out
    for (int i = 0; i < n; ++i) {
        const double d = e.diag[i];
        const double s = i > 0 ? e.sub[i] : 0.0;
        const double u = i + 1 < n ? e.sup[i] : 0.0;
        for (int c = 0; c < cols; ++c) {
            double acc = d * in[static_cast<std::size_t>(i) * cols + c];
            if (i > 0) acc += s * in[static_cast<std::size_t>(i - 1) * cols + c];
            if (i + 1 < n) acc += u * in[static_cast<std::size_t>(i + 1) * cols + c];
            out[static_cast<std::size_t>(i) * cols + c] = acc;
        }
    }
    // implicit solve in place
    for (int i = 1; i < n; ++i) {
        const double l = lower_[i];
        for (int c = 0; c < cols; ++c) {
            out[static_cast<std::size_t>(i) * cols + c] -=
                l * out[static_cast<std::size_t>(i - 1) * cols + c];
        }
    }
    const double pn = pivot_inv_[n - 1];
    for (int c = 0; c < cols; ++c) {
        out[static_cast<std::size_t>(n - 1) * cols + c] *= pn;
    }
    for (int i = n - 2; i >= 0; --i) {
        const double u = upper_[i];
        const double p = pivot_inv_[i];
        for (int c = 0; c < cols; ++c) {
            out[static_cast<std::size_t>(i) * cols + c] =
                (out[static_cast<std::size_t>(i) * cols + c] -
                 u * out[static_cast<std::size_t>(i + 1) * cols + c]) *
                p;
        }
    }
}

void CrankNicolsonStep::adjoint_apply(std::span<const double> in, std::span<double> out,
                                      std::span<double> work) const {
    const int n = size();
    // solve (LU)^T y = in: first U^T (lower, diag pivot, sub upper_),
    // then L^T (unit upper, super lower_)
    work[0] = in[0] * pivot_inv_[0];
    for (int i = 1; i < n; ++i) {
        work[i] = (in[i] - upper_[i - 1] * work[i - 1]) * pivot_inv_[i];
    }
    for (int i = n - 2; i >= 0; --i) {
        work[i] -= lower_[i + 1] * work[i + 1];
    }
    explicit_part_.apply_transposed(work, out);
}

namespace {

struct BuildAttempt {
    std::vector<CrankNicolsonStep> steps;
    TimeField killing_nodes;
    std::vector<double> kernel;
    std::vector<double> absorbed;
    double min_entry = 0.0;
};

// Propagates unit cell masses through all steps, filling kernel rows and the
// absorbed-mass vector with trapezoidal weights in time. The impulse vector
// carries cell masses, so the absorbed flux is the plain dot with V; this
// makes sum_j K[i][j] + r[i] = 1 an algebraic identity of the CN steps.
// Rows are independent; the range [row_begin, row_end) supports parallel
// builds.
void propagate_rows(const BuildAttempt& at, const TimeMesh& tm, int n,
                    int row_begin, int row_end, std::vector<double>& kernel,
                    std::vector<double>& absorbed, double& min_entry) {
    constexpr int kBlock = 8;
    const bool uniform = at.steps.size() == 1;
    double local_min = 0.0;
    std::vector<double> w, next;
    std::vector<long double> r_acc;
    for (int base = row_begin; base < row_end; base += kBlock) {
        const int cols = std::min(kBlock, row_end - base);
        w.assign(static_cast<std::size_t>(n) * cols, 0.0);
        next.assign(static_cast<std::size_t>(n) * cols, 0.0);
        r_acc.assign(static_cast<std::size_t>(cols), 0.0L);
        for (int c = 0; c < cols; ++c) {
            w[static_cast<std::size_t>(base + c) * cols + c] = 1.0;
            r_acc[static_cast<std::size_t>(c)] =
                0.5L * tm.dt * at.killing_nodes(0, base + c);
        }
        for (int k = 0; k < tm.n_steps; ++k) {
            at.steps[uniform ? 0 : static_cast<std::size_t>(k)].forward_apply_block(
                w, next, cols);
            std::swap(w, next);
            // Monitor every step: transient oscillations can die out by the
            // final time and still poison K and r.
            const double wt = (k + 1 == tm.n_steps) ? 0.5 : 1.0;
            const auto vk = at.killing_nodes.row(k + 1);
            for (int c = 0; c < cols; ++c) {
                long double flux = 0.0L;
                for (int j = 0; j < n; ++j) {
                    const double value = w[static_cast<std::size_t>(j) * cols + c];
                    local_min = std::min(local_min, value);
                    flux += static_cast<long double>(vk[j]) * value;
                }
                r_acc[static_cast<std::size_t>(c)] +=
                    static_cast<long double>(wt) * tm.dt * flux;
            }
        }
        for (int c = 0; c < cols; ++c) {
            for (int j = 0; j < n; ++j) {
                kernel[static_cast<std::size_t>(base + c) * n + j] =
                    w[static_cast<std::size_t>(j) * cols + c];
            }
            absorbed[base + c] = static_cast<double>(r_acc[static_cast<std::size_t>(c)]);
        }
    }
    min_entry = local_min;
}

BuildAttempt try_build(const KilledDiffusionSpec& spec, const SpaceGrid& g,
                       const TimeMesh& tm, int n_threads) {
    const int n = g.n_cells;
    BuildAttempt at;
    at.killing_nodes = TimeField(tm.n_nodes(), n);

    std::vector<Tridiagonal> gens;
    gens.reserve(static_cast<std::size_t>(tm.n_nodes()));
    bool time_independent = true;
    for (int k = 0; k <= tm.n_steps; ++k) {
        const double t = tm.t(k);
        gens.push_back(build_generator(spec, g, t).forward);
        if (k > 0 && time_independent) {
            time_independent = gens[static_cast<std::size_t>(k)].sub == gens[0].sub &&
                               gens[static_cast<std::size_t>(k)].diag == gens[0].diag &&
                               gens[static_cast<std::size_t>(k)].sup == gens[0].sup;
        }
        for (int i = 0; i < n; ++i) {
            at.killing_nodes(k, i) = spec.killing(t, g.center(i));
        }
    }
    // Time-independent coefficients collapse to a single step operator; the
    // impulse passes then stay cache-resident.
    if (time_independent) {
        at.steps.emplace_back(gens[0], gens[0], tm.dt);
    } else {
        at.steps.reserve(static_cast<std::size_t>(tm.n_steps));
        for (int k = 0; k < tm.n_steps; ++k) {
            at.steps.emplace_back(gens[k], gens[k + 1], tm.dt);
        }
    }

    at.kernel.assign(static_cast<std::size_t>(n) * n, 0.0);
    at.absorbed.assign(static_cast<std::size_t>(n), 0.0);

    if (n_threads <= 1) {
        propagate_rows(at, tm, n, 0, n, at.kernel, at.absorbed, at.min_entry);
    } else {
        const int workers = std::min(n_threads, n);
        std::vector<double> mins(static_cast<std::size_t>(workers), 0.0);
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            const int lo = n * w / workers;
            const int hi = n * (w + 1) / workers;
            pool.emplace_back([&, lo, hi, w] {
                propagate_rows(at, tm, n, lo, hi, at.kernel, at.absorbed, mins[w]);
            });
        }
        for (auto& th : pool) th.join();
        at.min_entry = *std::min_element(mins.begin(), mins.end());
    }
    return at;
}

} // namespace

KernelBundle build_kernel_bundle(const KilledDiffusionSpec& spec, const SpaceGrid& g,
                                 const TimeMesh& tm, const BundleOptions& opts) {
    TimeMesh mesh = tm;
    int refinements = 0;
    BuildAttempt at;
    while (true) {
        at = try_build(spec, g, mesh, opts.n_threads);
        if (at.min_entry >= -1e-12) break;
        if (refinements >= opts.max_refinements) {
            std::ostringstream msg;
            msg << "build_kernel_bundle: positivity failure after " << refinements
                << " dt refinements (dt = " << mesh.dt
                << ", most negative entry = " << at.min_entry << ")";
            throw std::runtime_error(msg.str());
        }
        ++refinements;
        mesh = TimeMesh::uniform(mesh.n_steps * 2);
    }

    KernelBundle bundle;
    bundle.grid = g;
    bundle.tm = mesh;
    bundle.steps = std::move(at.steps);
    bundle.killing_nodes = std::move(at.killing_nodes);
    bundle.kernel = std::move(at.kernel);
    bundle.absorbed = std::move(at.absorbed);
    bundle.refinements = refinements;

    const int n = g.n_cells;
    double min_entry = bundle.kernel[0];
    double max_defect = 0.0;
    for (int i = 0; i < n; ++i) {
        min_entry = std::min(min_entry,
                             *std::min_element(bundle.k_row(i).begin(),
                                               bundle.k_row(i).end()));
        const double defect =
            std::abs(accurate_sum(bundle.k_row(i)) + bundle.absorbed[i] - 1.0);
        max_defect = std::max(max_defect, defect);
    }
    bundle.min_kernel_entry = min_entry;
    bundle.max_row_defect = max_defect;
    if (max_defect > opts.tol_mass) {
        std::ostringstream msg;
        msg << "build_kernel_bundle: survival + absorption defect " << max_defect
            << " exceeds tol_mass " << opts.tol_mass;
        throw std::runtime_error(msg.str());
    }
    return bundle;
}

std::vector<double> KernelBundle::kernel_transpose_apply(
    std::span<const double> v) const {
    const int n = grid.n_cells;
    std::vector<long double> acc(static_cast<std::size_t>(n), 0.0L);
    for (int i = 0; i < n; ++i) {
        const double vi = v[i];
        if (vi == 0.0) continue;
        const auto row = k_row(i);
        for (int j = 0; j < n; ++j) acc[j] += static_cast<long double>(vi) * row[j];
    }
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) out[j] = static_cast<double>(acc[j]);
    return out;
}

std::vector<double> KernelBundle::kernel_apply(std::span<const double> v,
                                               double coffin) const {
    const int n = grid.n_cells;
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        long double acc = static_cast<long double>(coffin) * absorbed[i];
        const auto row = k_row(i);
        for (int j = 0; j < n; ++j) acc += static_cast<long double>(row[j]) * v[j];
        out[i] = static_cast<double>(acc);
    }
    return out;
}

namespace {

void require_nonnegative(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (x < 0.0) {
            throw std::invalid_argument(std::string(what) + ": negative input entry");
        }
    }
}

} // namespace

ForwardSweep propagate_forward(const KernelBundle& bundle,
                               std::span<const double> phihat0) {
    require_nonnegative(phihat0, "propagate_forward");
    const int n = bundle.grid.n_cells;
    const int steps = bundle.tm.n_steps;
    const double dt = bundle.tm.dt;
    const double h = bundle.grid.h;

    ForwardSweep sweep;
    sweep.phihat = TimeField(steps + 1, n);
    sweep.psihat.assign(static_cast<std::size_t>(steps + 1), 0.0);

    std::copy(phihat0.begin(), phihat0.end(), sweep.phihat.row(0).begin());
    std::vector<double> work(static_cast<std::size_t>(n));

    double flux_prev = h * accurate_dot(bundle.v_node(0), sweep.phihat.row(0));
    for (int k = 0; k < steps; ++k) {
        bundle.step_at(k).forward_apply(sweep.phihat.row(k), sweep.phihat.row(k + 1),
                                        work);
        const double flux_next =
            h * accurate_dot(bundle.v_node(k + 1), sweep.phihat.row(k + 1));
        sweep.psihat[k + 1] = sweep.psihat[k] + 0.5 * dt * (flux_prev + flux_next);
        flux_prev = flux_next;
    }
    return sweep;
}

BackwardSweep propagate_backward(const KernelBundle& bundle,
                                 std::span<const double> phi1, double psi) {
    require_nonnegative(phi1, "propagate_backward");
    if (psi < 0.0) {
        throw std::invalid_argument("propagate_backward: psi must be >= 0");
    }
    const int n = bundle.grid.n_cells;
    const int steps = bundle.tm.n_steps;
    const double dt = bundle.tm.dt;

    BackwardSweep sweep;
    sweep.phi = TimeField(steps + 1, n);
    std::copy(phi1.begin(), phi1.end(), sweep.phi.row(steps).begin());

    // Carry g_k = phi_k + psi dt/2 V_k so that the Duhamel source uses the
    // same trapezoidal weights as the absorbed-mass vector; then
    // phi(0) = K phi(1) + psi r holds to roundoff.
    std::vector<double> g(static_cast<std::size_t>(n)), next(g), work(g);
    const auto v_last = bundle.v_node(steps);
    for (int i = 0; i < n; ++i) g[i] = phi1[i] + psi * 0.5 * dt * v_last[i];

    for (int k = steps - 1; k >= 0; --k) {
        bundle.step_at(k).adjoint_apply(g, next, work);
        const auto vk = bundle.v_node(k);
        const double wt = (k == 0) ? 0.5 : 1.0;
        auto row = sweep.phi.row(k);
        for (int i = 0; i < n; ++i) {
            g[i] = next[i] + psi * wt * dt * vk[i];
            row[i] = (k == 0) ? g[i] : g[i] - psi * 0.5 * dt * vk[i];
        }
    }
    return sweep;
}

} // namespace ubridge
