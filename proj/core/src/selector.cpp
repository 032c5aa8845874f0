#include "flowrl/selector.hpp"

namespace flowrl {

SelectionResult select_chunk(const Tensor& obs, const Tensor& prefix, const FlowModel& policy,
                             const CriticEnsemble* ensemble, const SelectionConfig& cfg,
                             Rng& rng) {
    if (cfg.n_samples < 1) throw ArgumentError("select_chunk: n_samples must be >= 1");
    if (cfg.use_critic && !ensemble) throw ArgumentError("select_chunk: critic required");
    if (obs.b != 1) throw ShapeError("select_chunk: one observation at a time");

    int N = cfg.n_samples;
    ConditioningContext ctx = policy.encode_context(obs, prefix);
    SampleResult cand = policy.sample(ctx, cfg.sample_std, N, rng);

    std::vector<double> scores;
    if (cfg.use_critic) {
        scores = ensemble->min_q(FlowModel::tile_batch(obs, N), FlowModel::tile_batch(prefix, N),
                                 cand.actions);
    } else {
        scores = cand.log_prob;
    }
    int best = 0;
    for (int i = 1; i < N; ++i)
        if (scores[i] > scores[best]) best = i;

    SelectionResult res;
    res.index = best;
    res.score = scores[best];
    res.chunk = Tensor(1, policy.chunk_len(), policy.action_dim());
    std::size_t per = res.chunk.size();
    std::copy(cand.actions.data.begin() + best * per, cand.actions.data.begin() + (best + 1) * per,
              res.chunk.data.begin());
    return res;
}

}  // namespace flowrl
