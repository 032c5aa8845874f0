#pragma once

#include "flowrl/critic.hpp"
#include "flowrl/flow.hpp"

namespace flowrl {

struct SelectionConfig {
    int n_samples = 1;
    double sample_std = 0.7;
    bool use_critic = true;
};

struct SelectionResult {
    Tensor chunk;       // [1, H, A]
    double score = 0.0;  // min-ensemble Q if use_critic, else model log-prob
    int index = 0;       // which candidate won (lowest index on ties)
};

/// Best-of-N chunk selection: draw n_samples candidates from the policy and
/// return the argmax of the critic's min-ensemble value (or, without a
/// critic, the candidate with the highest model log-likelihood).
SelectionResult select_chunk(const Tensor& obs, const Tensor& prefix, const FlowModel& policy,
                             const CriticEnsemble* ensemble, const SelectionConfig& cfg, Rng& rng);

}  // namespace flowrl
