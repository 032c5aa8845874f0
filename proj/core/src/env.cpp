#include "flowrl/env.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include <Eigen/Dense>

namespace flowrl {

namespace {

double clip1(double v) { return std::clamp(v, -1.0, 1.0); }

double dist2d(double ax, double ay, double bx, double by) {
    return std::hypot(ax - bx, ay - by);
}

}  // namespace

ChunkEnv::ChunkStep ChunkEnv::step_chunk(const Tensor& chunk) {
    if (chunk.c != action_dim()) throw ShapeError("step_chunk: action dim mismatch");
    ChunkStep out;
    for (int j = 0; j < chunk.t; ++j) {
        std::vector<double> a(action_dim());
        for (int k = 0; k < action_dim(); ++k) a[k] = chunk.at(0, j, k);
        auto [r, done] = step(a);
        out.rewards.push_back(r);
        if (done) {
            out.done = true;
            break;
        }
    }
    out.next_obs = observe();
    return out;
}

// ---- MultimodalBandit ----

std::vector<double> MultimodalBandit::reset(std::uint64_t) {
    hit_ = false;
    done_ = false;
    return observe();
}

bool MultimodalBandit::in_mode(double x, double y, int sign) {
    return dist2d(x, y, sign * kModeX, 0.0) <= kModeRadius;
}

std::pair<double, bool> MultimodalBandit::step(const std::vector<double>& action) {
    if (done_) throw ArgumentError("bandit: episode finished");
    double x = clip1(action.at(0)), y = clip1(action.at(1));
    hit_ = in_mode(x, y, +1) || in_mode(x, y, -1);
    done_ = true;
    return {hit_ ? 1.0 : 0.0, true};
}

// ---- ChunkedPointMass ----

std::vector<double> ChunkedPointMass::reset(std::uint64_t seed) {
    Rng rng(seed);
    pos_ = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)};
    do {
        goal_ = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)};
    } while (dist2d(pos_[0], pos_[1], goal_[0], goal_[1]) < 0.6);
    reached_ = false;
    t_ = 0;
    return observe();
}

std::vector<double> ChunkedPointMass::observe() const {
    return {pos_[0], pos_[1], goal_[0], goal_[1]};
}

std::pair<double, bool> ChunkedPointMass::step(const std::vector<double>& action) {
    pos_[0] = clip1(pos_[0] + kStepScale * clip1(action.at(0)));
    pos_[1] = clip1(pos_[1] + kStepScale * clip1(action.at(1)));
    ++t_;
    double r = 0.0;
    if (!reached_ && dist2d(pos_[0], pos_[1], goal_[0], goal_[1]) <= kGoalRadius) {
        reached_ = true;
        r = 1.0;
    }
    return {r, t_ >= horizon()};
}

// ---- TabularChunkMDP ----

TabularChunkMDP::TabularChunkMDP() {
    // fixed asymmetric cycle: actions jump +1/+2/+4 states; two reward events
    for (int s = 0; s < kStates; ++s) {
        next_[s] = {(s + 1) % kStates, (s + 2) % kStates, (s + 4) % kStates};
        reward_[s] = {0.0, 0.0, 0.0};
    }
    reward_[3][0] = 1.0;
    reward_[5][2] = 0.5;
}

TabularChunkMDP::TabularChunkMDP(std::array<std::array<int, kActions>, kStates> next,
                                 std::array<std::array<double, kActions>, kStates> reward)
    : next_(next), reward_(reward) {}

std::array<double, 2> TabularChunkMDP::anchor(int u) {
    static constexpr std::array<std::array<double, 2>, kActions> kAnchors{
        {{-0.7, -0.7}, {0.7, -0.7}, {0.0, 0.7}}};
    return kAnchors.at(u);
}

int TabularChunkMDP::decode(double x, double y) {
    int best = 0;
    double bd = 1e300;
    for (int u = 0; u < kActions; ++u) {
        auto a = anchor(u);
        double d = dist2d(x, y, a[0], a[1]);
        if (d < bd) {
            bd = d;
            best = u;
        }
    }
    return best;
}

std::vector<double> TabularChunkMDP::one_hot(int s) {
    std::vector<double> o(kStates, 0.0);
    o.at(s) = 1.0;
    return o;
}

std::vector<double> TabularChunkMDP::reset(std::uint64_t seed) {
    state_ = int(seed % kStates);
    t_ = 0;
    total_reward_ = 0.0;
    return observe();
}

std::vector<double> TabularChunkMDP::observe() const { return one_hot(state_); }

std::pair<double, bool> TabularChunkMDP::step(const std::vector<double>& action) {
    int u = decode(action.at(0), action.at(1));
    double r = reward_[state_][u];
    state_ = next_[state_][u];
    total_reward_ += r;
    ++t_;
    return {r, t_ >= horizon()};
}

// ---- ToyRotator ----

double ToyRotator::drop_probability(double a) {
    return std::min(0.25, 0.02 + 0.3 * std::abs(a) * std::abs(a) * std::abs(a));
}

std::vector<double> ToyRotator::reset(std::uint64_t seed) {
    rng_ = Rng(seed);
    rotation_ = 0.0;
    dropped_ = false;
    t_ = 0;
    return observe();
}

std::vector<double> ToyRotator::observe() const {
    return {rotation_ / 360.0, double(t_) / horizon()};
}

std::pair<double, bool> ToyRotator::step(const std::vector<double>& action) {
    double a = clip1(action.at(0));
    double before = rotation_;
    rotation_ += kDegPerUnit * a;
    double r = std::max(0.0, std::floor(rotation_ / 90.0) - std::floor(before / 90.0));
    ++t_;
    if (rng_.uniform() < drop_probability(a)) dropped_ = true;
    return {r, dropped_ || t_ >= horizon()};
}

std::unique_ptr<ChunkEnv> make_env(const std::string& name) {
    if (name == "bandit") return std::make_unique<MultimodalBandit>();
    if (name == "pointmass") return std::make_unique<ChunkedPointMass>();
    if (name == "tabular") return std::make_unique<TabularChunkMDP>();
    if (name == "rotator") return std::make_unique<ToyRotator>();
    throw ConfigError("unknown environment: " + name);
}

// ---- DP oracle ----

int chunk_code(const std::vector<int>& actions) {
    int code = 0, mul = 1;
    for (int u : actions) {
        if (u < 0 || u >= TabularChunkMDP::kActions) throw ArgumentError("chunk_code: bad action");
        code += u * mul;
        mul *= TabularChunkMDP::kActions;
    }
    return code;
}

std::vector<int> chunk_actions(int code, int H) {
    std::vector<int> out(H);
    for (int t = 0; t < H; ++t) {
        out[t] = code % TabularChunkMDP::kActions;
        code /= TabularChunkMDP::kActions;
    }
    return out;
}

namespace {

// chunk return and end state under the deterministic dynamics
std::pair<double, int> roll_chunk(const TabularChunkMDP& mdp, int s, int code, double gamma,
                                  int H) {
    double r = 0.0, g = 1.0;
    for (int t = 0; t < H; ++t) {
        int u = code % TabularChunkMDP::kActions;
        code /= TabularChunkMDP::kActions;
        r += g * mdp.reward(s, u);
        s = mdp.next_state(s, u);
        g *= gamma;
    }
    return {r, s};
}

}  // namespace

std::vector<std::vector<double>> dp_chunk_q(const TabularChunkMDP& mdp,
                                            const std::vector<int>& policy_chunk, double gamma,
                                            int H) {
    int S = TabularChunkMDP::kStates;
    if (int(policy_chunk.size()) != S) throw ArgumentError("dp_chunk_q: need one chunk per state");
    if (H < 1 || H > 3) throw ArgumentError("dp_chunk_q: H must be in [1,3]");
    int C = 1;
    for (int t = 0; t < H; ++t) C *= TabularChunkMDP::kActions;
    double gH = std::pow(gamma, H);

    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(S, S);
    Eigen::VectorXd b(S);
    for (int s = 0; s < S; ++s) {
        auto [r, e] = roll_chunk(mdp, s, policy_chunk[s], gamma, H);
        b(s) = r;
        A(s, e) -= gH;
    }
    Eigen::VectorXd V = A.fullPivLu().solve(b);

    std::vector<std::vector<double>> Q(S, std::vector<double>(C, 0.0));
    for (int s = 0; s < S; ++s)
        for (int c = 0; c < C; ++c) {
            auto [r, e] = roll_chunk(mdp, s, c, gamma, H);
            Q[s][c] = r + gH * V(e);
        }
    return Q;
}

std::vector<std::vector<double>> dp_chunk_q_vi(const TabularChunkMDP& mdp,
                                               const std::vector<int>& policy_chunk, double gamma,
                                               int H) {
    int S = TabularChunkMDP::kStates;
    if (int(policy_chunk.size()) != S) throw ArgumentError("dp_chunk_q: need one chunk per state");
    int C = 1;
    for (int t = 0; t < H; ++t) C *= TabularChunkMDP::kActions;
    double gH = std::pow(gamma, H);

    std::vector<double> V(S, 0.0);
    for (int iter = 0; iter < 1000000; ++iter) {
        double delta = 0.0;
        std::vector<double> nv(S);
        for (int s = 0; s < S; ++s) {
            auto [r, e] = roll_chunk(mdp, s, policy_chunk[s], gamma, H);
            nv[s] = r + gH * V[e];
            delta = std::max(delta, std::abs(nv[s] - V[s]));
        }
        V = nv;
        if (delta < 1e-12) break;
    }
    std::vector<std::vector<double>> Q(S, std::vector<double>(C, 0.0));
    for (int s = 0; s < S; ++s)
        for (int c = 0; c < C; ++c) {
            auto [r, e] = roll_chunk(mdp, s, c, gamma, H);
            Q[s][c] = r + gH * V[e];
        }
    return Q;
}

// ---- scripted demonstrations ----

namespace {

Episode script_episode(ChunkEnv& env, bool sabotage, Rng& rng) {
    std::uint64_t env_seed = rng.next_u64();
    std::vector<double> obs = env.reset(env_seed);
    int D = env.obs_dim(), A = env.action_dim(), T = env.horizon();

    std::vector<std::vector<double>> obs_rows, act_rows;
    std::vector<double> rewards;
    const std::string name = env.name();

    // point-mass sabotage: steer to a decoy point away from the goal
    std::array<double, 2> decoy{0.0, 0.0};
    if (name == "pointmass" && sabotage) {
        auto& pm = dynamic_cast<ChunkedPointMass&>(env);
        double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        double rad = rng.uniform(0.5, 0.9);
        decoy = {clip1(pm.goal()[0] + rad * std::cos(ang)),
                 clip1(pm.goal()[1] + rad * std::sin(ang))};
    }
    int bandit_sign = rng.uniform() < 0.5 ? 1 : -1;

    bool done = false;
    while (!done && int(obs_rows.size()) < T) {
        std::vector<double> a(A, 0.0);
        if (name == "pointmass") {
            auto& pm = dynamic_cast<ChunkedPointMass&>(env);
            const auto tgt = sabotage ? decoy : pm.goal();
            double noise = sabotage ? 0.2 : 0.1;
            a[0] = clip1(3.0 * (tgt[0] - pm.position()[0]) + rng.normal(0.0, noise));
            a[1] = clip1(3.0 * (tgt[1] - pm.position()[1]) + rng.normal(0.0, noise));
        } else if (name == "bandit") {
            if (sabotage) {
                do {
                    a[0] = rng.uniform(-1.0, 1.0);
                    a[1] = rng.uniform(-1.0, 1.0);
                } while (MultimodalBandit::in_mode(a[0], a[1], 1) ||
                         MultimodalBandit::in_mode(a[0], a[1], -1));
            } else {
                a[0] = clip1(bandit_sign * MultimodalBandit::kModeX + rng.normal(0.0, 0.05));
                a[1] = clip1(rng.normal(0.0, 0.05));
            }
        } else if (name == "tabular") {
            auto anchor = TabularChunkMDP::anchor(int(rng.index(TabularChunkMDP::kActions)));
            a[0] = clip1(anchor[0] + rng.normal(0.0, 0.1));
            a[1] = clip1(anchor[1] + rng.normal(0.0, 0.1));
        } else if (name == "rotator") {
            a[0] = sabotage ? 1.0 : clip1(0.45 + rng.normal(0.0, 0.05));
        } else {
            throw ConfigError("no scripted behavior for environment: " + name);
        }
        obs_rows.push_back(obs);
        act_rows.push_back(a);
        auto [r, d] = env.step(a);
        rewards.push_back(r);
        obs = env.observe();
        done = d;
    }

    int n = int(obs_rows.size());
    Episode ep;
    ep.observations = Tensor(1, n, D);
    ep.actions = Tensor(1, n, A);
    for (int t = 0; t < n; ++t) {
        for (int k = 0; k < D; ++k) ep.observations.at(0, t, k) = obs_rows[t][k];
        for (int k = 0; k < A; ++k) ep.actions.at(0, t, k) = act_rows[t][k];
    }
    ep.rewards = std::move(rewards);
    ep.success = env.success();
    ep.source = Source::demo;
    return ep;
}

}  // namespace

std::vector<Episode> gen_demos(ChunkEnv& env, int n, double fail_frac, std::uint64_t seed) {
    if (n < 1) throw ArgumentError("gen_demos: n must be >= 1");
    if (fail_frac < 0.0 || fail_frac > 1.0) throw ArgumentError("gen_demos: bad failure fraction");
    int want_fail = int(std::lround(n * fail_frac));
    int want_succ = n - want_fail;
    Rng rng(seed);
    std::vector<Episode> out;
    int attempts = 0, max_attempts = 60 * n + 1000;
    while (int(out.size()) < n && attempts < max_attempts) {
        ++attempts;
        bool sabotage = want_fail > 0 && (want_succ == 0 || attempts % 2 == 0 || want_fail > want_succ);
        Episode ep = script_episode(env, sabotage, rng);
        if (ep.success && want_succ > 0) {
            --want_succ;
            out.push_back(std::move(ep));
        } else if (!ep.success && want_fail > 0) {
            --want_fail;
            out.push_back(std::move(ep));
        }
    }
    if (int(out.size()) < n) throw DataError("gen_demos: could not meet success/failure quota");
    return out;
}

// ---- reward labeling (task rules) ----

void label_rewards(Episode& episode, const std::string& rule) {
    episode.check();
    int T = episode.length();
    if (rule == "bandit") {
        for (int t = 0; t < T; ++t) {
            double x = clip1(episode.actions.at(0, t, 0)), y = clip1(episode.actions.at(0, t, 1));
            episode.rewards[t] =
                (MultimodalBandit::in_mode(x, y, 1) || MultimodalBandit::in_mode(x, y, -1)) ? 1.0
                                                                                            : 0.0;
        }
    } else if (rule == "pointmass") {
        double gx = episode.observations.at(0, 0, 2), gy = episode.observations.at(0, 0, 3);
        double px = episode.observations.at(0, 0, 0), py = episode.observations.at(0, 0, 1);
        bool entered = false;
        for (int t = 0; t < T; ++t) {
            px = clip1(px + ChunkedPointMass::kStepScale * clip1(episode.actions.at(0, t, 0)));
            py = clip1(py + ChunkedPointMass::kStepScale * clip1(episode.actions.at(0, t, 1)));
            double r = 0.0;
            if (!entered && dist2d(px, py, gx, gy) <= ChunkedPointMass::kGoalRadius) {
                entered = true;
                r = 1.0;
            }
            episode.rewards[t] = r;
        }
    } else if (rule == "rotator") {
        double rot = 0.0;
        for (int t = 0; t < T; ++t) {
            double before = rot;
            rot += ToyRotator::kDegPerUnit * clip1(episode.actions.at(0, t, 0));
            episode.rewards[t] =
                std::max(0.0, std::floor(rot / 90.0) - std::floor(before / 90.0));
        }
    } else {
        throw ConfigError("unknown reward rule: " + rule);
    }
}

// ---- chunked rollout executor ----

Episode rollout_episode(const FlowModel& policy, const CriticEnsemble* ensemble, ChunkEnv& env,
                        const NormStats& stats, const SelectionConfig& sel, std::uint64_t seed,
                        Rng& rng) {
    int D = env.obs_dim(), A = env.action_dim();
    int H = policy.chunk_len(), P = policy.prefix_len();
    if (D != policy.obs_dim() || A != policy.action_dim())
        throw ShapeError("rollout: policy/environment shape mismatch");

    std::vector<double> obs = env.reset(seed);
    std::deque<std::vector<double>> queue;  // committed normalized actions
    for (int i = 0; i < P; ++i) queue.emplace_back(A, 0.0);

    std::vector<std::vector<double>> obs_rows, act_rows;
    std::vector<double> rewards;
    bool done = false;
    while (!done && int(obs_rows.size()) < env.horizon()) {
        Tensor obs_t(1, 1, D);
        std::vector<double> no = stats.apply_obs_vec(obs);
        std::copy(no.begin(), no.end(), obs_t.data.begin());
        Tensor prefix(1, P, A);
        for (int j = 0; j < P; ++j)
            for (int k = 0; k < A; ++k) prefix.at(0, j, k) = queue[j][k];

        SelectionResult res = select_chunk(obs_t, prefix, policy, ensemble, sel, rng);
        for (int j = 0; j < H; ++j) {
            std::vector<double> a(A);
            for (int k = 0; k < A; ++k) a[k] = res.chunk.at(0, j, k);
            queue.push_back(std::move(a));
        }
        for (int j = 0; j < H && !done && int(obs_rows.size()) < env.horizon(); ++j) {
            std::vector<double> anorm = queue.front();
            queue.pop_front();
            std::vector<double> araw(A);
            for (int k = 0; k < A; ++k) araw[k] = clip1(stats.unapply_action(anorm[k], k));
            obs_rows.push_back(obs);
            act_rows.push_back(araw);
            auto [r, d] = env.step(araw);
            rewards.push_back(r);
            obs = env.observe();
            done = d;
        }
    }

    int n = int(obs_rows.size());
    Episode ep;
    ep.observations = Tensor(1, n, D);
    ep.actions = Tensor(1, n, A);
    for (int t = 0; t < n; ++t) {
        for (int k = 0; k < D; ++k) ep.observations.at(0, t, k) = obs_rows[t][k];
        for (int k = 0; k < A; ++k) ep.actions.at(0, t, k) = act_rows[t][k];
    }
    ep.rewards = std::move(rewards);
    ep.success = env.success();
    ep.source = Source::online;
    return ep;
}

EvalMetrics evaluate(const FlowModel& policy, const CriticEnsemble* ensemble, ChunkEnv& env,
                     const NormStats& stats, const SelectionConfig& sel, int episodes,
                     std::uint64_t seed) {
    if (episodes < 1) throw ArgumentError("evaluate: episodes must be >= 1");
    EvalMetrics m;
    Rng rng(seed ^ 0x5bf03635ull);
    for (int i = 0; i < episodes; ++i) {
        Episode ep = rollout_episode(policy, ensemble, env, stats, sel, seed + i, rng);
        m.success_rate += ep.success ? 1.0 : 0.0;
        for (double r : ep.rewards) m.mean_return += r;
        m.mean_length += ep.length();
    }
    m.success_rate /= episodes;
    m.mean_return /= episodes;
    m.mean_length /= episodes;
    return m;
}

}  // namespace flowrl
