#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

// Finite-difference gradient oracle. Runs in double; the relative-error
// criterion is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

namespace bbfcn {

inline double grad_rel_error(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    return std::fabs(analytic - numeric) / denom;
}

/// Central-difference check of an analytic gradient of a scalar function.
/// `loss` maps the parameter vector to a scalar; `analytic` is d(loss)/d(x)
/// evaluated at x. Returns the max relative error over all coordinates.
inline double finite_diff_check(const std::function<double(const std::vector<double>&)>& loss,
                                const std::vector<double>& x,
                                const std::vector<double>& analytic, double eps = 1e-5) {
    std::vector<double> probe = x;
    double worst = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double up = loss(probe);
        probe[i] = orig - eps;
        const double down = loss(probe);
        probe[i] = orig;
        const double numeric = (up - down) / (2.0 * eps);
        worst = std::max(worst, grad_rel_error(analytic[i], numeric));
    }
    return worst;
}

}  // namespace bbfcn
