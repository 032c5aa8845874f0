#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "flowrl/checkpoint.hpp"
#include "flowrl/critic.hpp"
#include "flowrl/env.hpp"
#include "flowrl/flow.hpp"
#include "flowrl/optim.hpp"
#include "flowrl/selector.hpp"

namespace flowrl {

struct StageReport {
    std::string stage;
    std::int64_t steps = 0;
    double wall_time_sec = 0.0;
    double final_loss = 0.0;
    std::vector<double> loss_curve;  // subsampled
    std::map<std::string, double> metrics;

    std::string to_jsonl() const;
};

/// Value support from dataset statistics: [min chunk return, max chunk
/// return / (1 - gamma^H)] with a 10% margin on each side. Used when only
/// transition rows are available; the geometric extrapolation badly
/// over-widens the support on sparse tasks.
ValueSupport support_from_chunks(const ReplayBuffer& data, const TrainConfig& cfg);

/// Value support from the empirical discounted returns-to-go of whole
/// episodes — the tightest range the critic ever has to represent.
ValueSupport support_from_episodes(const std::vector<Episode>& episodes, const TrainConfig& cfg);

/// Teacher for distillation: raw observation -> raw H-step action chunk.
using Teacher = std::function<Tensor(const std::vector<double>& obs)>;
Teacher scripted_teacher(const std::string& env_name, int chunk_len);

/// Owns the policy, critic ensemble, optimizers, buffers, and the one RNG
/// stream that makes the whole run deterministic. Stages mutate this state in
/// place; checkpoints capture all of it bit-exactly.
class Pipeline {
public:
    Pipeline(const RunConfig& cfg, int obs_dim, int action_dim);

    /// Fit normalization stats, build the imitation buffer (successful
    /// episodes only) and the full offline buffer, and pick the value support.
    void load_dataset(const std::vector<Episode>& episodes);
    void set_norm_stats(const NormStats& stats);

    StageReport stage_il();
    StageReport stage_warmup();
    /// Warm-up with an arbitrary bootstrap policy and data source (the
    /// Bellman-oracle entry point); the standard overload uses the flow.
    StageReport stage_warmup_with(const ReplayBuffer& data,
                                  const CriticEnsemble::ChunkSampler& bootstrap,
                                  std::int64_t steps);
    StageReport stage_offline();
    StageReport stage_online(ChunkEnv& env);
    StageReport stage_distill(ChunkEnv& env, const Teacher& teacher);

    /// Execute the enabled stages in order, resuming any stage whose
    /// checkpoint already exists in out_dir. Throws ResumeError on a config
    /// hash mismatch or a missing prerequisite.
    std::vector<StageReport> run_full(const std::vector<Episode>* episodes);

    FlowModel& policy() { return *policy_; }
    CriticEnsemble& critics();
    const NormStats& stats() const { return stats_; }
    const ReplayBuffer& offline_buffer() const { return offline_; }
    const ReplayBuffer& il_buffer() const { return il_data_; }
    ReplayBuffer& online_buffer() { return online_; }
    Rng& rng() { return rng_; }
    const RunConfig& config() const { return cfg_; }

    EvalMetrics eval_policy(ChunkEnv& env, const SelectionConfig& sel, int episodes,
                            std::uint64_t seed);

    void save_checkpoint(const std::string& path, const std::string& stage) const;
    /// Returns the stage tag stored in the file.
    std::string load_checkpoint(const std::string& path);

private:
    StageReport run_critic_stage(const std::string& name, const ReplayBuffer& data,
                                 const CriticEnsemble::ChunkSampler& bootstrap,
                                 std::int64_t steps);
    double critic_step(const TransitionBatch& batch, const CriticEnsemble::ChunkSampler& bootstrap);
    double actor_rl_step(const TransitionBatch& batch, const TransitionBatch& bc_batch);
    void ensure_critics();
    void require(bool ok, const std::string& what) const;

    RunConfig cfg_;
    int obs_dim_ = 0, action_dim_ = 0;
    std::unique_ptr<FlowModel> policy_;
    std::unique_ptr<CriticEnsemble> critics_;
    NormStats stats_;
    bool have_stats_ = false;
    ValueSupport support_;
    bool have_support_ = false;
    ReplayBuffer il_data_, offline_, online_;
    AdamW actor_opt_, critic_opt_;
    Rng rng_;
};

}  // namespace flowrl
