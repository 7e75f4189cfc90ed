#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ubridge/grid.hpp"

namespace ubridge {

/// Coordinate selection for the projective metric on the augmented cone.
/// Components where both endpoint marginals vanish carry the 0/0 Sinkhorn
/// convention and must stay out of the max/min ratio extremes.
struct SupportMask {
    std::vector<std::uint8_t> cells;
    bool coffin = true;

    static SupportMask all(int n_cells, bool coffin = true) {
        SupportMask m;
        m.cells.assign(static_cast<std::size_t>(n_cells), 1);
        m.coffin = coffin;
        return m;
    }
    static SupportMask from_support(std::span<const double> density, bool coffin) {
        SupportMask m;
        m.cells.resize(density.size());
        for (std::size_t i = 0; i < density.size(); ++i) {
            m.cells[i] = density[i] > 0.0 ? 1 : 0;
        }
        m.coffin = coffin;
        return m;
    }
};

/// Hilbert projective distance log(M/m) between two cone elements restricted
/// to the mask. Returns +infinity if a ratio degenerates (a zero coordinate
/// on the mask); throws if a masked coordinate is strictly negative.
double hilbert_distance(const AugmentedFunction& x, const AugmentedFunction& y,
                        const SupportMask& mask);

/// Birkhoff contraction ratio tanh(diameter/4); 1 for an infinite diameter.
double birkhoff_ratio(double diameter);

/// Empirical lower estimate 2 * max_i d_H(image_i, ones) of the projective
/// diameter of a positive map, from a sample of its images. Diagnostic, not
/// a proof.
double diameter_bound(std::span<const AugmentedFunction> images);

/// Per-iteration convergence diagnostics of the fixed-point solve.
struct HilbertReport {
    std::vector<double> distances;
    std::optional<double> birkhoff_bound;

    /// Successive ratios d_{k+1}/d_k for the distances above the noise floor.
    std::vector<double> contraction_ratios() const;

    /// Median of the successive ratios; quiet NaN when fewer than two usable
    /// distances exist.
    double fitted_ratio() const;
};

} // namespace ubridge
