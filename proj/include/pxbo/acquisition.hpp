#ifndef PXBO_ACQUISITION_HPP
#define PXBO_ACQUISITION_HPP

#include <cmath>
#include <map>
#include <numbers>

#include "dataset.hpp"
#include "errors.hpp"
#include "surrogate_gp.hpp"

namespace pxbo {

inline constexpr double kDefaultXi = 0.01;

/// Standard normal CDF through erfc, accurate in both tails.
inline double normal_cdf(double z)
{
    return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

inline double normal_pdf(double z)
{
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

/// Expected improvement of a Gaussian with the given mean and variance over
/// incumbent + xi. Zero when the variance is zero.
inline double expected_improvement(double mean, double variance, double incumbent, double xi = kDefaultXi)
{
    if (!std::isfinite(mean) || !std::isfinite(variance) || !std::isfinite(incumbent) || !std::isfinite(xi))
        throw ArgumentError("expected_improvement: non-finite input");
    if (variance < 0)
        throw ArgumentError("expected_improvement: negative variance");
    if (xi < 0)
        throw ArgumentError("expected_improvement: negative xi");
    if (variance == 0)
        return 0.0;
    const double sigma = std::sqrt(variance);
    const double improvement = mean - incumbent - xi;
    const double z = improvement / sigma;
    return std::max(0.0, improvement * normal_cdf(z) + sigma * normal_pdf(z));
}

struct AcquisitionField {
    std::map<LocationId, double> values;
    double xi = kDefaultXi;
    double incumbent = 0;
};

inline AcquisitionField evaluate_acquisition(const Posterior& posterior, double incumbent, double xi = kDefaultXi)
{
    AcquisitionField field;
    field.xi = xi;
    field.incumbent = incumbent;
    for (const auto& [id, mu] : posterior.mean)
        field.values.emplace(id, expected_improvement(mu, posterior.variance.at(id), incumbent, xi));
    return field;
}

/// Argmax of expected improvement. Values within 1e-12 count as tied; ties
/// go to the larger posterior variance, then the lowest index.
inline LocationId select_next(const Posterior& posterior, double incumbent, double xi = kDefaultXi)
{
    if (posterior.empty())
        throw ArgumentError("select_next: empty posterior");
    constexpr double kTie = 1e-12;
    const auto field = evaluate_acquisition(posterior, incumbent, xi);

    auto it = field.values.begin();
    LocationId best = it->first;
    double best_ei = it->second;
    double best_var = posterior.variance.at(best);
    for (++it; it != field.values.end(); ++it) {
        const double ei = it->second;
        const double var = posterior.variance.at(it->first);
        if (ei > best_ei + kTie || (std::abs(ei - best_ei) <= kTie && var > best_var)) {
            best = it->first;
            best_ei = ei;
            best_var = var;
        }
    }
    return best;
}

} // namespace pxbo

#endif // PXBO_ACQUISITION_HPP
