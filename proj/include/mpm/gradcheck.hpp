#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "mpm/rng.hpp"
#include "mpm/tensor.hpp"

namespace mpm {

struct FdCoordinate {
    size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct FdReport {
    double max_rel_err = 0.0;
    size_t checked = 0;
    FdCoordinate worst;
    bool ok(double rel_tol) const { return max_rel_err < rel_tol; }
};

// Central-difference gradient verification, always in double precision (the
// 64-bit shadow mode). `f` must be deterministic (dropout disabled) and build
// its scalar output on the tape it is handed; `at` must participate in that
// computation. Checks every coordinate unless max_coords caps it, in which
// case a seeded sample of distinct coordinates is used.
inline FdReport finite_difference_check(const std::function<Tensor<double>(Tape<double>&)>& f, Tensor<double> at,
                                        double h = 1e-3,
                                        size_t max_coords = std::numeric_limits<size_t>::max(),
                                        uint64_t sample_seed = 0x5eed) {
    at.set_requires_grad(true);
    at.ensure_grad();
    at.zero_grad();

    Tape<double> tape(true);
    Tensor<double> loss = f(tape);
    backward(loss, tape);
    std::vector<double> analytic = at.grad();

    std::vector<size_t> coords;
    if (at.numel() <= max_coords) {
        coords.resize(at.numel());
        for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
        // Sample without replacement via a partial Fisher-Yates over indices.
        std::vector<size_t> all(at.numel());
        for (size_t i = 0; i < all.size(); ++i) all[i] = i;
        SplitRng rng(sample_seed);
        for (size_t i = 0; i < max_coords; ++i) {
            const size_t j = i + static_cast<size_t>(rng.below(all.size() - i));
            std::swap(all[i], all[j]);
        }
        coords.assign(all.begin(), all.begin() + static_cast<long>(max_coords));
    }

    auto eval = [&]() {
        Tape<double> t(false);
        return f(t).data()[0];
    };

    FdReport report;
    for (size_t idx : coords) {
        const double saved = at.data()[idx];
        at.data()[idx] = saved + h;
        const double fp = eval();
        at.data()[idx] = saved - h;
        const double fm = eval();
        at.data()[idx] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double ga = analytic[idx];
        const double rel = std::abs(ga - numeric) / std::max({std::abs(ga), std::abs(numeric), 1e-8});
        ++report.checked;
        if (rel >= report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst = {idx, ga, numeric, rel};
        }
    }
    return report;
}

}  // namespace mpm
