#include "ubridge/grid.hpp"

#include <cmath>
#include <string>

namespace ubridge {

double accurate_sum(std::span<const double> v) {
    long double acc = 0.0L;
    for (double x : v) acc += x;
    return static_cast<double>(acc);
}

double accurate_dot(std::span<const double> a, std::span<const double> b) {
    long double acc = 0.0L;
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<long double>(a[i]) * b[i];
    return static_cast<double>(acc);
}

double xlogx(double x) {
    return x > 0.0 ? x * std::log(x) : 0.0;
}

SpaceGrid SpaceGrid::uniform(double lo, double hi, int n_cells) {
    if (n_cells < 3) {
        throw std::invalid_argument("SpaceGrid: n_cells must be >= 3");
    }
    if (!(hi > lo)) {
        throw std::invalid_argument("SpaceGrid: domain_hi must exceed domain_lo");
    }
    SpaceGrid g;
    g.lo = lo;
    g.hi = hi;
    g.n_cells = n_cells;
    g.h = (hi - lo) / n_cells;
    g.centers.resize(static_cast<std::size_t>(n_cells));
    for (int i = 0; i < n_cells; ++i) {
        g.centers[static_cast<std::size_t>(i)] = lo + (i + 0.5) * g.h;
    }
    return g;
}

TimeMesh TimeMesh::uniform(int n_steps) {
    if (n_steps < 1) {
        throw std::invalid_argument("TimeMesh: n_steps must be >= 1");
    }
    TimeMesh tm;
    tm.n_steps = n_steps;
    tm.dt = 1.0 / n_steps;
    return tm;
}

double total_mass(const AugmentedMeasure& p, const SpaceGrid& g) {
    return g.h * accurate_sum(p.density) + p.coffin;
}

std::vector<double> sample_density(const std::function<double(double)>& f,
                                   const SpaceGrid& g) {
    std::vector<double> v(static_cast<std::size_t>(g.n_cells));
    for (int i = 0; i < g.n_cells; ++i) {
        const double value = f(g.center(i));
        if (value < 0.0) {
            throw std::invalid_argument(
                "sample_density: negative sample at x = " + std::to_string(g.center(i)));
        }
        v[static_cast<std::size_t>(i)] = value;
    }
    return v;
}

void normalize_mass(std::vector<double>& v, const SpaceGrid& g, double target_mass) {
    const double mass = g.h * accurate_sum(v);
    if (mass <= 0.0) {
        if (target_mass == 0.0) return;
        throw std::invalid_argument("normalize_mass: zero-mass input");
    }
    const double scale = target_mass / mass;
    for (double& x : v) x *= scale;
}

} // namespace ubridge
