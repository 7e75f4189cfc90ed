#include "ubridge/hilbert.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ubridge {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Folds one coordinate pair into the running ratio extremes.
// Returns false when the ratio degenerates (zero numerator or denominator).
bool fold_ratio(double xi, double yi, double& mmax, double& mmin) {
    if (xi < 0.0 || yi < 0.0) {
        throw std::invalid_argument("hilbert_distance: negative coordinate on mask");
    }
    if (xi == 0.0 || yi == 0.0) return false;
    const double r = xi / yi;
    mmax = std::max(mmax, r);
    mmin = std::min(mmin, r);
    return true;
}

} // namespace

double hilbert_distance(const AugmentedFunction& x, const AugmentedFunction& y,
                        const SupportMask& mask) {
    if (x.values.size() != y.values.size() || mask.cells.size() != x.values.size()) {
        throw std::invalid_argument("hilbert_distance: size mismatch");
    }
    double mmax = -kInf;
    double mmin = kInf;
    bool any = false;
    for (std::size_t i = 0; i < x.values.size(); ++i) {
        if (!mask.cells[i]) continue;
        any = true;
        if (!fold_ratio(x.values[i], y.values[i], mmax, mmin)) return kInf;
    }
    if (mask.coffin) {
        any = true;
        if (!fold_ratio(x.coffin_value, y.coffin_value, mmax, mmin)) return kInf;
    }
    if (!any) {
        throw std::invalid_argument("hilbert_distance: empty mask");
    }
    return std::log(mmax / mmin);
}

double birkhoff_ratio(double diameter) {
    if (diameter < 0.0) {
        throw std::invalid_argument("birkhoff_ratio: negative diameter");
    }
    if (std::isinf(diameter)) return 1.0;
    return std::tanh(0.25 * diameter);
}

double diameter_bound(std::span<const AugmentedFunction> images) {
    if (images.empty()) {
        throw std::invalid_argument("diameter_bound: empty sample");
    }
    AugmentedFunction ones;
    ones.values.assign(images[0].values.size(), 1.0);
    ones.coffin_value = 1.0;
    const SupportMask mask = SupportMask::all(static_cast<int>(ones.values.size()));
    double worst = 0.0;
    for (const auto& img : images) {
        worst = std::max(worst, hilbert_distance(img, ones, mask));
    }
    return 2.0 * worst;
}

std::vector<double> HilbertReport::contraction_ratios() const {
    std::vector<double> out;
    for (std::size_t k = 0; k + 1 < distances.size(); ++k) {
        if (distances[k] > 1e-12 && std::isfinite(distances[k]) &&
            std::isfinite(distances[k + 1])) {
            out.push_back(distances[k + 1] / distances[k]);
        }
    }
    return out;
}

double HilbertReport::fitted_ratio() const {
    std::vector<double> r = contraction_ratios();
    if (r.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::nth_element(r.begin(), r.begin() + r.size() / 2, r.end());
    return r[r.size() / 2];
}

} // namespace ubridge
