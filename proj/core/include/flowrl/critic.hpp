#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "flowrl/data.hpp"
#include "flowrl/flow.hpp"
#include "flowrl/nn.hpp"

namespace flowrl {

/// Fixed categorical value support: evenly spaced bin centers on
/// [v_min, v_max] with a Gaussian smoothing width for target projection.
struct ValueSupport {
    double v_min = 0.0;
    double v_max = 1.0;
    int num_bins = 101;
    double hl_sigma = 0.0;

    static ValueSupport make(double v_min, double v_max, int num_bins, double sigma_ratio);
    double bin_width() const { return (v_max - v_min) / (num_bins - 1); }
    double center(int i) const { return v_min + i * bin_width(); }
    double edge(int i) const { return v_min + (i - 0.5) * bin_width(); }  // i in [0, num_bins]
    void validate() const;
};

/// Gaussian-CDF mass per bin, renormalized over the support. Targets far
/// outside the support collapse onto the nearest edge bin.
std::vector<double> hl_gauss_project(double y, const ValueSupport& support);

/// Mean of a categorical distribution over the support's bin centers.
double scalar_q(const std::vector<double>& probs, const ValueSupport& support);

/// One distributional Q network: observation, flattened prefix, and flattened
/// action-chunk tokens with a learned positional bias, a small pre-norm
/// transformer, and a categorical head read from the observation token.
class CriticNet {
public:
    CriticNet(const TrainConfig& cfg, int obs_dim, int action_dim, std::uint64_t seed);
    CriticNet(const CriticNet&) = delete;
    CriticNet& operator=(const CriticNet&) = delete;

    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    void copy_from(const CriticNet& other);

    // obs [B,1,D], prefix [B,P,A], chunk [B,H,A] -> logits [B,1,num_bins]
    Var logits_t(Tape& tape, Var obs, Var prefix, Var chunk, double dropout, Rng& rng) const;

    Tensor q_distribution(const Tensor& obs, const Tensor& prefix, const Tensor& chunk) const;

private:
    struct Layer {
        RMSNorm n_attn, n_ff;
        MultiheadAttention attn;
        SwiGLU ff;
    };
    TrainConfig cfg_;
    int obs_dim_ = 0, action_dim_ = 0;
    ParamStore store_;
    LinearLayer obs_proj_, prefix_proj_, chunk_proj_;
    Param* pos_ = nullptr;
    std::vector<Layer> layers_;
    RMSNorm final_norm_;
    LinearLayer head_;
};

/// Ensemble of independently initialized critics with slow target copies.
class CriticEnsemble {
public:
    CriticEnsemble(const TrainConfig& cfg, int obs_dim, int action_dim,
                   const ValueSupport& support);

    int num_members() const { return int(members_.size()); }
    CriticNet& member(int i) { return *members_.at(i); }
    CriticNet& target(int i) { return *targets_.at(i); }
    const CriticNet& member(int i) const { return *members_.at(i); }
    const CriticNet& target(int i) const { return *targets_.at(i); }
    const ValueSupport& support() const { return support_; }
    void set_support(const ValueSupport& s);

    /// min over members of the categorical mean, one value per batch row.
    std::vector<double> min_q(const Tensor& obs, const Tensor& prefix, const Tensor& chunk,
                              bool use_targets = false) const;

    /// Differentiable min-over-members categorical mean -> [B,1,1].
    Var min_q_t(Tape& tape, Var obs, Var prefix, Var chunk, double dropout, Rng& rng) const;

    /// Bootstrap chunk source: (next_obs [B,1,D], next_prefix [B,P,A]) -> one
    /// sampled chunk per row [B,H,A].
    using ChunkSampler = std::function<Tensor(const Tensor&, const Tensor&, Rng&)>;

    /// H-step discounted reward sum plus gamma^H (1-d) min over *target*
    /// members at a fresh policy sample (temperature sigma_sample).
    std::vector<double> td_targets(const TransitionBatch& batch, const ChunkSampler& sampler,
                                   Rng& rng) const;
    std::vector<double> td_targets(const TransitionBatch& batch, const FlowModel& policy,
                                   Rng& rng) const;

    /// Mean over batch and members of CE(hl_gauss_project(y) || predicted).
    Var critic_loss_t(Tape& tape, const TransitionBatch& batch, const std::vector<double>& y,
                      double dropout, Rng& rng) const;

    void polyak_update(double tau);

private:
    void compute_targets(const TransitionBatch& batch, const std::vector<double>& boot, double gH,
                         std::vector<double>& y) const;

    TrainConfig cfg_;
    ValueSupport support_;
    std::vector<std::unique_ptr<CriticNet>> members_;
    std::vector<std::unique_ptr<CriticNet>> targets_;
};

}  // namespace flowrl
