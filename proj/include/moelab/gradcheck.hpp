#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/param.hpp"
#include "moelab/rng.hpp"

namespace moelab {

struct GradCheckOptions {
    double step = 1e-4;           // central-difference half step
    std::size_t max_coords = 24;  // coordinates sampled per parameter tensor
    std::uint64_t sample_seed = 17;
    double denom_floor = 1e-6;
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coords_checked = 0;
};

// Central-difference check of reverse-mode gradients. `eval` must be a pure
// function of the current parameter values; `compute_grads` must leave
// d(eval)/d(theta) in each Parameter::grad. Coordinates are subsampled
// deterministically when tensors are large.
template <typename S>
GradCheckResult grad_check(const std::vector<Parameter<S>*>& params,
                           const std::function<double()>& eval,
                           const std::function<void()>& compute_grads,
                           const GradCheckOptions& opt = {}) {
    if (opt.step <= 0.0) throw ParameterError("grad_check: step must be positive");
    compute_grads();
    std::vector<Tensor<S>> analytic;
    analytic.reserve(params.size());
    for (const Parameter<S>* p : params) analytic.push_back(p->grad);

    GradCheckResult res;
    CounterRng rng(opt.sample_seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<S>* p = params[pi];
        const std::size_t n = p->value.numel();
        std::vector<std::size_t> coords;
        if (n <= opt.max_coords) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            CounterRng sub = rng.stream(pi);
            for (std::size_t c = 0; c < opt.max_coords; ++c)
                coords.push_back(static_cast<std::size_t>(sub.at(c) % n));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        }
        for (std::size_t ci : coords) {
            const S saved = p->value.data[ci];
            p->value.data[ci] = saved + static_cast<S>(opt.step);
            const double fp = eval();
            p->value.data[ci] = saved - static_cast<S>(opt.step);
            const double fmn = eval();
            p->value.data[ci] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fmn))
                throw EvalError("grad_check: non-finite objective at " + p->name);
            const double fd = (fp - fmn) / (2.0 * opt.step);
            const double ad = static_cast<double>(analytic[pi].data[ci]);
            const double denom = std::max({std::abs(fd), std::abs(ad), opt.denom_floor});
            const double rel = std::abs(fd - ad) / denom;
            ++res.coords_checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = p->name;
                res.worst_coord = ci;
                res.analytic = ad;
                res.numeric = fd;
            }
        }
    }
    return res;
}

}  // namespace moelab
