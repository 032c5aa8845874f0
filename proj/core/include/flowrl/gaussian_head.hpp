#pragma once

#include "flowrl/config.hpp"
#include "flowrl/nn.hpp"

namespace flowrl {

/// Diagonal-Gaussian ablation policy: a tanh-squashed unimodal head with the
/// same conditioning inputs as the flow, used to demonstrate mode collapse on
/// multimodal data. MLP trunk, per-element mean and bounded log-std.
class GaussianHead {
public:
    GaussianHead(const TrainConfig& cfg, int obs_dim, int action_dim);
    GaussianHead(const GaussianHead&) = delete;
    GaussianHead& operator=(const GaussianHead&) = delete;

    ParamStore& params() { return store_; }
    int chunk_len() const { return cfg_.chunk_len; }
    int action_dim() const { return action_dim_; }

    // obs [B,1,D], prefix [B,P,A], a [B,H,A] in (-1,1)
    Var log_prob_t(Tape& tape, Var obs, Var prefix, Var a) const;
    Var il_loss_t(Tape& tape, const Tensor& obs, const Tensor& prefix, const Tensor& targets,
                  Rng& rng) const;

    Tensor sample(const Tensor& obs, const Tensor& prefix, double std, int n, Rng& rng) const;

private:
    std::pair<Var, Var> mean_logstd(Tape& tape, Var obs, Var prefix) const;  // each [B,1,H*A]

    TrainConfig cfg_;
    int obs_dim_ = 0, action_dim_ = 0;
    ParamStore store_;
    LinearLayer in_, hid_, mean_, logstd_;
};

}  // namespace flowrl
