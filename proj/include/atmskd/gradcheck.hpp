#pragma once

#include <cmath>
#include <functional>

#include "atmskd/rng.hpp"
#include "atmskd/tensor.hpp"

namespace atmskd {

/// Compare the analytic gradient of a scalar-valued function against central
/// differences. Returns the maximum over checked coordinates of
/// |analytic - numeric| / max(1, |numeric|).
///
/// `max_coords` limits the number of perturbed coordinates (a seeded sample
/// without replacement); 0 checks every coordinate.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                double h, std::size_t max_coords = 0,
                                std::uint64_t sample_seed = 0) {
    if (!(h > 0.0)) throw ParameterError("finite_diff_check: step h must be > 0");

    Tensor probe = x.detach();
    probe.set_requires_grad(true);
    Tensor loss = f(probe);
    if (loss.numel() != 1) throw UsageError("finite_diff_check: f must return a scalar");
    loss.backward();
    const std::vector<double> analytic = probe.grad();

    std::vector<std::size_t> coords;
    const std::size_t n = probe.data().size();
    if (max_coords == 0 || max_coords >= n) {
        coords.resize(n);
        for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
        RngStream rng(sample_seed);
        std::vector<int> perm = rng.permutation(static_cast<int>(n));
        coords.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(max_coords));
    }

    Tensor work = x.detach();
    double worst = 0.0;
    for (std::size_t idx : coords) {
        const double saved = work.data()[idx];
        work.data()[idx] = saved + h;
        const double fp = f(work).item();
        work.data()[idx] = saved - h;
        const double fm = f(work).item();
        work.data()[idx] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[idx] - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace atmskd
