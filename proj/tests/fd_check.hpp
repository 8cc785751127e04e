#pragma once

// Central finite-difference gradient checking against the autodiff path.
// Test-only; independent of the backward implementations it verifies.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mvit/autodiff.hpp"
#include "mvit/rng.hpp"

namespace fdcheck {

struct Result {
    double max_rel_err = 0.0;
    std::string worst;  // "<param>[i]"
    int checked = 0;
};

// Evaluates `loss_fn` (which must rebuild its graph from the store's
// current parameter values) under +/-h perturbations of each parameter
// coordinate and compares to the analytic gradient. When a parameter has
// more than `max_coords_per_param` scalars, a deterministic random subset
// is probed.
inline Result check_param_grads(mvit::ParamStore& store,
                                const std::function<mvit::Var()>& loss_fn,
                                double h = 1e-5, int max_coords_per_param = 24,
                                uint64_t probe_seed = 1234) {
    using namespace mvit;
    Result res;
    Var loss = loss_fn();
    GradMap gm;
    backward(loss, gm);
    std::vector<Tensor> analytic = gather_grads(store, gm);

    Rng rng(probe_seed);
    for (size_t k = 0; k < store.count(); ++k) {
        Var p = store.all()[k];
        int64_t n = p->value.numel();
        std::vector<int64_t> coords;
        if (n <= max_coords_per_param) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int c = 0; c < max_coords_per_param; ++c)
                coords.push_back(rng.uniform_int(0, n - 1));
        }
        for (int64_t i : coords) {
            double orig = p->value[i];
            p->value[i] = orig + h;
            double lp = loss_fn()->value.value();
            p->value[i] = orig - h;
            double lm = loss_fn()->value.value();
            p->value[i] = orig;
            double fd = (lp - lm) / (2.0 * h);
            double an = analytic[k][i];
            ++res.checked;
            // directions the loss provably ignores (e.g. a constant key
            // bias under softmax) leave only FD noise; absolute agreement
            // is the meaningful test there
            if (std::fabs(fd - an) <= 1e-7) continue;
            double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
            double rel = std::fabs(fd - an) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = p->name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

}  // namespace fdcheck
