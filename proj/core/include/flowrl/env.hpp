#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "flowrl/critic.hpp"
#include "flowrl/data.hpp"
#include "flowrl/flow.hpp"
#include "flowrl/selector.hpp"

namespace flowrl {

/// Episodic chunk-control environment. Deterministic given the reset seed and
/// the action stream; rewards are sparse per task rule.
class ChunkEnv {
public:
    virtual ~ChunkEnv() = default;
    virtual std::string name() const = 0;
    virtual int obs_dim() const = 0;
    virtual int action_dim() const = 0;
    virtual int horizon() const = 0;

    virtual std::vector<double> reset(std::uint64_t seed) = 0;
    /// One raw-unit action step -> (reward, done).
    virtual std::pair<double, bool> step(const std::vector<double>& action) = 0;
    virtual std::vector<double> observe() const = 0;
    virtual bool success() const = 0;

    struct ChunkStep {
        std::vector<double> rewards;  // one per executed step (may stop early)
        std::vector<double> next_obs;
        bool done = false;
    };
    ChunkStep step_chunk(const Tensor& chunk);  // [*, H, A] row 0
};

/// One-step two-mode reward landscape: reward 1 within radius 0.15 of
/// (+0.6, 0) or (-0.6, 0).
class MultimodalBandit : public ChunkEnv {
public:
    static constexpr double kModeX = 0.6;
    static constexpr double kModeRadius = 0.15;

    std::string name() const override { return "bandit"; }
    int obs_dim() const override { return 2; }
    int action_dim() const override { return 2; }
    int horizon() const override { return 1; }
    std::vector<double> reset(std::uint64_t seed) override;
    std::pair<double, bool> step(const std::vector<double>& action) override;
    std::vector<double> observe() const override { return {0.0, 0.0}; }
    bool success() const override { return hit_; }

    static bool in_mode(double x, double y, int sign);

private:
    bool hit_ = false;
    bool done_ = true;
};

/// Velocity-controlled point on [-1,1]^2 with a sparse reward on first goal
/// entry. Observation = (position, goal).
class ChunkedPointMass : public ChunkEnv {
public:
    static constexpr double kGoalRadius = 0.1;
    static constexpr double kStepScale = 0.1;

    std::string name() const override { return "pointmass"; }
    int obs_dim() const override { return 4; }
    int action_dim() const override { return 2; }
    int horizon() const override { return 60; }
    std::vector<double> reset(std::uint64_t seed) override;
    std::pair<double, bool> step(const std::vector<double>& action) override;
    std::vector<double> observe() const override;
    bool success() const override { return reached_; }

    const std::array<double, 2>& position() const { return pos_; }
    const std::array<double, 2>& goal() const { return goal_; }

private:
    std::array<double, 2> pos_{0.0, 0.0};
    std::array<double, 2> goal_{0.0, 0.0};
    bool reached_ = false;
    int t_ = 0;
};

/// Six-state MDP with three atomic actions embedded as fixed anchor points in
/// [-1,1]^2; continuous actions decode to the nearest anchor. Deterministic
/// transitions, enumerable chunks — the substrate for the Bellman oracle.
class TabularChunkMDP : public ChunkEnv {
public:
    static constexpr int kStates = 6;
    static constexpr int kActions = 3;

    TabularChunkMDP();
    TabularChunkMDP(std::array<std::array<int, kActions>, kStates> next,
                    std::array<std::array<double, kActions>, kStates> reward);

    std::string name() const override { return "tabular"; }
    int obs_dim() const override { return kStates; }
    int action_dim() const override { return 2; }
    int horizon() const override { return 40; }
    std::vector<double> reset(std::uint64_t seed) override;
    std::pair<double, bool> step(const std::vector<double>& action) override;
    std::vector<double> observe() const override;
    bool success() const override { return total_reward_ > 0.0; }

    int state() const { return state_; }
    int next_state(int s, int u) const { return next_[s][u]; }
    double reward(int s, int u) const { return reward_[s][u]; }
    static std::array<double, 2> anchor(int u);
    static int decode(double x, double y);
    static std::vector<double> one_hot(int s);

private:
    std::array<std::array<int, kActions>, kStates> next_;
    std::array<std::array<double, kActions>, kStates> reward_;
    int state_ = 0;
    int t_ = 0;
    double total_reward_ = 0.0;
};

/// Scalar rotation task: +1 reward per accumulated 90 degrees, with a
/// per-step drop probability p = min(0.25, 0.02 + 0.3 |a|^3) that ends the
/// episode. Reward rate vs drop rate is a real trade-off.
class ToyRotator : public ChunkEnv {
public:
    static constexpr double kDegPerUnit = 45.0;

    std::string name() const override { return "rotator"; }
    int obs_dim() const override { return 2; }
    int action_dim() const override { return 1; }
    int horizon() const override { return 50; }
    std::vector<double> reset(std::uint64_t seed) override;
    std::pair<double, bool> step(const std::vector<double>& action) override;
    std::vector<double> observe() const override;
    bool success() const override { return rotation_ >= 90.0; }

    double rotation() const { return rotation_; }
    static double drop_probability(double a);

private:
    Rng rng_;
    double rotation_ = 0.0;
    bool dropped_ = false;
    int t_ = 0;
};

std::unique_ptr<ChunkEnv> make_env(const std::string& name);

/// Exact H-step policy-evaluation fixed point on the tabular MDP for a
/// deterministic chunk-per-state policy. Q[s][c] indexed by base-3 chunk code
/// (digit t = action at step t). Linear solve; `dp_chunk_q_vi` iterates the
/// same operator to 1e-10 as a cross-check.
std::vector<std::vector<double>> dp_chunk_q(const TabularChunkMDP& mdp,
                                            const std::vector<int>& policy_chunk, double gamma,
                                            int H);
std::vector<std::vector<double>> dp_chunk_q_vi(const TabularChunkMDP& mdp,
                                               const std::vector<int>& policy_chunk, double gamma,
                                               int H);
int chunk_code(const std::vector<int>& actions);
std::vector<int> chunk_actions(int code, int H);

/// Scripted demonstrations with a configured failure fraction; success flags
/// come from the task rule. Deterministic given seed.
std::vector<Episode> gen_demos(ChunkEnv& env, int n, double fail_frac, std::uint64_t seed);

struct EvalMetrics {
    double success_rate = 0.0;
    double mean_return = 0.0;
    double mean_length = 0.0;
};

/// Roll one episode with the chunked executor: the policy is queried P steps
/// ahead of execution, conditioning on the committed-but-unexecuted prefix.
Episode rollout_episode(const FlowModel& policy, const CriticEnsemble* ensemble, ChunkEnv& env,
                        const NormStats& stats, const SelectionConfig& sel, std::uint64_t seed,
                        Rng& rng);

EvalMetrics evaluate(const FlowModel& policy, const CriticEnsemble* ensemble, ChunkEnv& env,
                     const NormStats& stats, const SelectionConfig& sel, int episodes,
                     std::uint64_t seed);

}  // namespace flowrl
