#pragma once

#include <utility>
#include <vector>

#include "flowrl/config.hpp"
#include "flowrl/nn.hpp"

namespace flowrl {

/// Context tokens derived from (observation, prefix actions); one token per
/// prefix action plus one for the observation, each of the flow hidden width.
struct ConditioningContext {
    Tensor tokens;  // [B, P+1, hidden]
};

struct SampleResult {
    Tensor actions;                // [N, H, A]
    std::vector<double> log_prob;  // model likelihood under the N(0, I) base
};

/// Element-wise arctanh bounding transform. Returns the unbounded values and
/// the per-row log|det| contribution sum(-log(1 - a^2)).
std::pair<Tensor, std::vector<double>> bound_forward(const Tensor& a);

/// Conditional normalizing flow over action chunks: affine coupling blocks
/// with fixed random token partitions, an arctanh/tanh boundary transform,
/// and attention-based conditioners. Evaluation is pure; training mutates
/// parameters through the tape + optimizer.
class FlowModel {
public:
    FlowModel(const TrainConfig& cfg, int obs_dim, int action_dim);
    FlowModel(const FlowModel&) = delete;
    FlowModel& operator=(const FlowModel&) = delete;

    int chunk_len() const { return cfg_.chunk_len; }
    int prefix_len() const { return cfg_.prefix_len; }
    int action_dim() const { return action_dim_; }
    int obs_dim() const { return obs_dim_; }
    const TrainConfig& config() const { return cfg_; }

    ParamStore& params() { return store_; }
    const std::vector<std::vector<int>>& partitions() const { return k1_; }
    const std::vector<std::vector<int>>& partitions_k2() const { return k2_; }
    void set_partitions(const std::vector<std::vector<int>>& k1,
                        const std::vector<std::vector<int>>& k2);

    // tape graph builders; obs [B,1,D], prefix [B,P,A], a/z0 [B,H,A]
    Var encode_context_t(Tape& tape, Var obs, Var prefix) const;
    std::pair<Var, Var> forward_t(Tape& tape, Var a, Var ctx, double dropout, Rng& rng) const;
    std::pair<Var, Var> inverse_t(Tape& tape, Var z0, Var ctx, double dropout, Rng& rng) const;
    Var log_prob_t(Tape& tape, Var a, Var ctx, double dropout, Rng& rng) const;
    Var base_log_prob_t(Tape& tape, Var z0) const;

    /// Mean of -log pi(perturb(a*) | o) over the batch; the imitation loss.
    Var il_loss_t(Tape& tape, const Tensor& obs, const Tensor& prefix, const Tensor& targets,
                  double dropout, Rng& rng) const;

    // pure evaluation wrappers (no gradients, no dropout)
    ConditioningContext encode_context(const Tensor& obs, const Tensor& prefix) const;
    std::pair<Tensor, std::vector<double>> flow_forward(const Tensor& a,
                                                        const ConditioningContext& ctx) const;
    std::pair<Tensor, std::vector<double>> flow_inverse(const Tensor& z0,
                                                        const ConditioningContext& ctx) const;
    std::vector<double> log_prob(const Tensor& a, const ConditioningContext& ctx) const;
    SampleResult sample(const ConditioningContext& ctx, double std, int n, Rng& rng) const;

    static Tensor tile_batch(const Tensor& x, int n);

private:
    struct Block {
        std::vector<int> k1, k2, scatter;
        LinearLayer emb;
        Param* pos = nullptr;
        Param* queries = nullptr;
        RMSNorm n_self, n_cross, n_ff, n_qcross, n_qff;
        MultiheadAttention self_attn, cross_attn, q_cross;
        SwiGLU ff, q_ff;
        LinearLayer head_s1, head_s2, head_b1, head_b2;
    };

    int flow_tokens() const;
    int flow_channels() const;
    std::pair<Var, Var> conditioner(Tape& tape, const Block& blk, Var x1, Var ctx, double dropout,
                                    Rng& rng) const;
    Var scatter_chunk(Tape& tape, const Block& blk, Var y1, Var y2) const;

    TrainConfig cfg_;
    int obs_dim_ = 0;
    int action_dim_ = 0;
    ParamStore store_;
    LinearLayer obs_proj_;
    LinearLayer prefix_proj_;
    Param* prefix_pos_ = nullptr;
    std::vector<Block> blocks_;
    std::vector<std::vector<int>> k1_, k2_;
};

}  // namespace flowrl
