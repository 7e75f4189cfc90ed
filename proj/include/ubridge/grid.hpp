#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace ubridge {

/// Sums a range with a long-double accumulator. Mass-balance checks in the
/// solver rely on sums that are accurate to a few ulps, which plain
/// left-to-right double accumulation does not give for long vectors.
double accurate_sum(std::span<const double> v);

/// Long-double accumulated dot product.
double accurate_dot(std::span<const double> a, std::span<const double> b);

/// x*log(x) with the limit value 0 at x = 0.
double xlogx(double x);

/// Uniform cell-centered grid on [lo, hi]. Nodes are cell midpoints, so
/// h * sum(density) is the midpoint quadrature of the density.
struct SpaceGrid {
    double lo = 0.0;
    double hi = 1.0;
    int n_cells = 0;
    double h = 0.0;
    std::vector<double> centers;

    static SpaceGrid uniform(double lo, double hi, int n_cells);

    double center(int i) const { return centers[static_cast<std::size_t>(i)]; }
};

/// Uniform mesh of [0, 1] with n_steps intervals, t_k = k * dt.
struct TimeMesh {
    int n_steps = 0;
    double dt = 0.0;

    static TimeMesh uniform(int n_steps);

    double t(int k) const { return static_cast<double>(k) * dt; }
    int n_nodes() const { return n_steps + 1; }
};

/// Nonnegative mass on the grid plus a scalar coffin mass: the augmented
/// measure p = (rho, q). The density is stored per unit length.
struct AugmentedMeasure {
    std::vector<double> density;
    double coffin = 0.0;
};

/// Function on the augmented state space: values at cell centers plus one
/// coffin coordinate.
struct AugmentedFunction {
    std::vector<double> values;
    double coffin_value = 0.0;
};

/// h * sum(density) + coffin.
double total_mass(const AugmentedMeasure& p, const SpaceGrid& g);

/// Samples a closed-form density at the cell centers. Throws
/// std::invalid_argument if any sample is negative.
std::vector<double> sample_density(const std::function<double(double)>& f,
                                   const SpaceGrid& g);

/// Rescales v so that h * sum(v) == target_mass. Throws if v has zero mass
/// and target_mass != 0.
void normalize_mass(std::vector<double>& v, const SpaceGrid& g, double target_mass);

/// Dense time-indexed field: n_times rows of n_cells values, row-major.
struct TimeField {
    int n_times = 0;
    int n_cells = 0;
    std::vector<double> data;

    TimeField() = default;
    TimeField(int nt, int nx)
        : n_times(nt), n_cells(nx),
          data(static_cast<std::size_t>(nt) * static_cast<std::size_t>(nx), 0.0) {}

    double& operator()(int k, int i) {
        return data[static_cast<std::size_t>(k) * n_cells + i];
    }
    double operator()(int k, int i) const {
        return data[static_cast<std::size_t>(k) * n_cells + i];
    }
    std::span<double> row(int k) {
        return {data.data() + static_cast<std::size_t>(k) * n_cells,
                static_cast<std::size_t>(n_cells)};
    }
    std::span<const double> row(int k) const {
        return {data.data() + static_cast<std::size_t>(k) * n_cells,
                static_cast<std::size_t>(n_cells)};
    }
};

} // namespace ubridge
