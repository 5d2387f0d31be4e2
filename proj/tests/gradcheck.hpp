// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "craft/tensor.hpp"

namespace craft::testing {

struct GradCheckResult {
    bool ok = true;
    double worst_rel_err = 0.0;
    std::string worst_where;
    size_t checked = 0;
};

// Central finite differences against the tape's analytic gradients.
// `build` must construct the full forward pass from current parameter values
// and return the scalar loss tensor. Binary64 throughout, step 1e-5 default.
inline GradCheckResult gradcheck(std::vector<Parameter*> params,
                                 const std::function<Tensor(Tape&)>& build, double h = 1e-5,
                                 double rtol = 1e-5) {
    GradCheckResult res;

    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        Tensor loss = build(tape);
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (Parameter* p : params) analytic.push_back(p->grad);

    auto eval = [&]() {
        Tape tape;
        return build(tape).scalar();
    };

    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        for (size_t i = 0; i < p.value.size(); ++i) {
            double orig = p.value[i];
            p.value[i] = orig + h;
            double fp = eval();
            p.value[i] = orig - h;
            double fm = eval();
            p.value[i] = orig;

            double fd = (fp - fm) / (2.0 * h);
            double an = analytic[pi][i];
            double scl = std::max(std::abs(fd), std::abs(an));
            double err;
            if (scl < 1e-7) {
                err = std::abs(fd - an) < 1e-7 ? 0.0 : std::abs(fd - an);
            } else {
                err = std::abs(fd - an) / scl;
            }
            ++res.checked;
            if (err > res.worst_rel_err) {
                res.worst_rel_err = err;
                res.worst_where = p.name + "[" + std::to_string(i) + "]";
            }
            if (err > rtol) res.ok = false;
        }
    }
    return res;
}

}  // namespace craft::testing
