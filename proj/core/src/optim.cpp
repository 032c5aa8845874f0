#include "flowrl/optim.hpp"

#include <cmath>

namespace flowrl {

double global_grad_norm(const std::vector<Param*>& params) {
    double sq = 0.0;
    for (Param* p : params)
        for (double g : p->grad.data) sq += g * g;
    return std::sqrt(sq);
}

void AdamW::step(const std::vector<Param*>& params, const AdamWConfig& cfg) {
    double clip_scale = 1.0;
    if (cfg.clip_norm > 0.0) {
        double norm = global_grad_norm(params);
        if (norm > cfg.clip_norm) clip_scale = cfg.clip_norm / norm;
    }
    ++t_;
    double bc1 = 1.0 - std::pow(cfg.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(t_));
    for (Param* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            double g = p->grad.data[i] * clip_scale;
            p->m.data[i] = cfg.beta1 * p->m.data[i] + (1.0 - cfg.beta1) * g;
            p->v.data[i] = cfg.beta2 * p->v.data[i] + (1.0 - cfg.beta2) * g * g;
            double mhat = p->m.data[i] / bc1;
            double vhat = p->v.data[i] / bc2;
            p->value.data[i] -=
                cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p->value.data[i]);
        }
    }
}

}  // namespace flowrl
