#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "flowrl/nn.hpp"

namespace flowrl::testutil {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;
};

// Central-difference gradient check. loss_fn must rebuild its tape from the
// current parameter values on every call and be deterministic.
inline GradCheckResult grad_check(const std::vector<Param*>& params,
                                  const std::function<double()>& loss_fn,
                                  const std::function<void()>& backward_fn,
                                  double h = 1e-5) {
    for (Param* p : params) p->zero_grad();
    backward_fn();
    GradCheckResult res;
    for (Param* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            double orig = p->value.data[i];
            p->value.data[i] = orig + h;
            double fp = loss_fn();
            p->value.data[i] = orig - h;
            double fm = loss_fn();
            p->value.data[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double an = p->grad.data[i];
            double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            double rel = std::abs(fd - an) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = p->name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

}  // namespace flowrl::testutil
