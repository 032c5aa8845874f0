#pragma once

#include <cstdint>
#include <vector>

#include "flowrl/tape.hpp"

namespace flowrl {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
};

/// Decoupled-weight-decay Adam with global-norm gradient clipping.
/// Moment buffers live on the Params; only the step counter lives here.
class AdamW {
public:
    void step(const std::vector<Param*>& params, const AdamWConfig& cfg);

    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }

private:
    std::int64_t t_ = 0;
};

double global_grad_norm(const std::vector<Param*>& params);

}  // namespace flowrl
