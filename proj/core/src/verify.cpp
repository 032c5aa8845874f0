#include "flowrl/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <Eigen/Dense>

#include "flowrl/critic.hpp"
#include "flowrl/env.hpp"
#include "flowrl/flow.hpp"
#include "flowrl/optim.hpp"

namespace flowrl::verify {

namespace {

double now_sec() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

TrainConfig flow_cfg(int H, int A, int depth, int hidden, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.chunk_len = H;
    cfg.prefix_len = 3;
    cfg.flow_depth = depth;
    cfg.hidden = hidden;
    cfg.heads = hidden >= 16 ? 4 : 1;
    cfg.seed = seed;
    (void)A;
    return cfg;
}

// fresh flows are identity maps (zero-initialized coupling heads); give the
// heads random weights so the checks exercise a non-trivial transform
void randomize_heads(FlowModel& model, double std, std::uint64_t seed) {
    Rng rng(seed);
    for (Param* p : model.params().all())
        if (p->name.find(".s2.") != std::string::npos || p->name.find(".b2.") != std::string::npos)
            for (auto& v : p->value.data) v = rng.normal(0.0, std);
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

double gauss_pdf(double x, double mu, double s) {
    double z = (x - mu) / s;
    return std::exp(-0.5 * z * z) / (s * 2.5066282746310002);
}

double gauss_mass(double a, double b, double mu, double s) {
    const int n = 4000;
    double h = (b - a) / n;
    double acc = gauss_pdf(a, mu, s) + gauss_pdf(b, mu, s);
    for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * gauss_pdf(a + i * h, mu, s);
    return acc * h / 3.0;
}

double fd_max_rel(const std::vector<Param*>& params, const std::function<double()>& loss_fn,
                  const std::function<void()>& backward_fn, double h = 1e-5) {
    for (Param* p : params) p->zero_grad();
    backward_fn();
    double worst = 0.0;
    for (Param* p : params)
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            double orig = p->value.data[i];
            p->value.data[i] = orig + h;
            double fp = loss_fn();
            p->value.data[i] = orig - h;
            double fm = loss_fn();
            p->value.data[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double an = p->grad.data[i];
            double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            worst = std::max(worst, std::abs(fd - an) / denom);
        }
    return worst;
}

}  // namespace

CheckResult check_round_trip(int H, int A, int depth, int hidden, int n_chunks, double tol,
                             std::uint64_t seed) {
    CheckResult res;
    res.name = "round-trip";
    double t0 = now_sec();
    TrainConfig cfg = flow_cfg(H, A, depth, hidden, seed);
    FlowModel model(cfg, 4, A);
    // moderate head scale: deep stacks of affine blocks amplify rounding by
    // the accumulated scale factor, which a trained (tanh-bounded) model
    // never reaches
    randomize_heads(model, 0.1, seed + 1);

    Rng rng(seed + 2);
    int B = n_chunks;
    Tensor obs = Tensor::randn(B, 1, 4, rng, 0.5);
    Tensor prefix = Tensor::randn(B, cfg.prefix_len, A, rng, 0.3);
    Tensor a(B, H, A);
    for (auto& v : a.data) v = rng.uniform(-0.97, 0.97);

    ConditioningContext ctx = model.encode_context(obs, prefix);
    auto [z, ld_fwd] = model.flow_forward(a, ctx);
    auto [back, ld_inv] = model.flow_inverse(z, ctx);
    double max_err = 0.0, max_ld = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        max_err = std::max(max_err, std::abs(a.data[i] - back.data[i]));
    for (int i = 0; i < B; ++i) max_ld = std::max(max_ld, std::abs(ld_fwd[i] + ld_inv[i]));
    double secs = now_sec() - t0;

    res.pass = max_err < tol && secs < 60.0;
    res.detail = "max_err=" + fmt(max_err) + " logdet_sym=" + fmt(max_ld) + " n=" +
                 std::to_string(n_chunks) + " time=" + fmt(secs) + "s";
    return res;
}

CheckResult check_jacobian(int H, int A, int depth, double tol, std::uint64_t seed) {
    CheckResult res;
    res.name = "jacobian";
    int n = H * A;
    if (n > 6) throw ArgumentError("check_jacobian: H*A must be <= 6");
    TrainConfig cfg = flow_cfg(H, A, depth, 16, seed);
    FlowModel model(cfg, 3, A);
    randomize_heads(model, 0.4, seed + 1);

    Rng rng(seed + 2);
    Tensor obs = Tensor::randn(1, 1, 3, rng, 0.5);
    Tensor prefix = Tensor::randn(1, cfg.prefix_len, A, rng, 0.3);
    ConditioningContext ctx = model.encode_context(obs, prefix);

    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        Tensor a(1, H, A);
        for (auto& v : a.data) v = rng.uniform(-0.8, 0.8);
        auto [z, ld] = model.flow_forward(a, ctx);

        Eigen::MatrixXd J(n, n);
        double h = 1e-6;
        for (int j = 0; j < n; ++j) {
            Tensor ap = a, am = a;
            ap.data[j] += h;
            am.data[j] -= h;
            Tensor zp = model.flow_forward(ap, ctx).first;
            Tensor zm = model.flow_forward(am, ctx).first;
            for (int i = 0; i < n; ++i) J(i, j) = (zp.data[i] - zm.data[i]) / (2.0 * h);
        }
        double num_ld = std::log(std::abs(J.fullPivLu().determinant()));
        double rel = std::abs(num_ld - ld[0]) / std::max(std::abs(num_ld), 1e-8);
        worst = std::max(worst, rel);
    }
    res.pass = worst < tol;
    res.detail = "max_rel=" + fmt(worst) + " dims=" + std::to_string(n);
    return res;
}

CheckResult check_normalization(int A, double tol, std::uint64_t seed) {
    CheckResult res;
    res.name = "normalization";
    if (A != 1 && A != 2) throw ArgumentError("check_normalization: A must be 1 or 2");
    TrainConfig cfg = flow_cfg(1, A, 3, 16, seed);
    FlowModel model(cfg, 2, A);
    randomize_heads(model, 0.4, seed + 1);

    Rng rng(seed + 2);
    Tensor obs = Tensor::randn(1, 1, 2, rng, 0.5);
    Tensor prefix = Tensor::randn(1, cfg.prefix_len, A, rng, 0.3);
    ConditioningContext ctx = model.encode_context(obs, prefix);

    // tanh-warped grid: a = tanh(u) concentrates points near the boundary,
    // where the bounded density spikes like 1/(1 - a^2)
    const double umax = 7.0;
    auto node = [&](int i, int n) { return std::tanh(-umax + (i + 0.5) * 2.0 * umax / n); };
    auto weight = [&](int i, int n) {
        double a = node(i, n);
        return (1.0 - a * a) * 2.0 * umax / n;
    };
    double integral = 0.0;
    if (A == 1) {
        int n = 4000;
        Tensor grid(n, 1, 1);
        for (int i = 0; i < n; ++i) grid.at(i, 0, 0) = node(i, n);
        ConditioningContext tiled{FlowModel::tile_batch(ctx.tokens, n)};
        std::vector<double> lp = model.log_prob(grid, tiled);
        for (int i = 0; i < n; ++i) integral += std::exp(lp[i]) * weight(i, n);
    } else {
        int n = 220;
        Tensor grid(n * n, 1, 2);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                grid.at(i * n + j, 0, 0) = node(i, n);
                grid.at(i * n + j, 0, 1) = node(j, n);
            }
        ConditioningContext tiled{FlowModel::tile_batch(ctx.tokens, n * n)};
        std::vector<double> lp = model.log_prob(grid, tiled);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                integral += std::exp(lp[i * n + j]) * weight(i, n) * weight(j, n);
    }
    res.pass = std::abs(integral - 1.0) < tol;
    res.detail = "integral=" + fmt(integral) + " A=" + std::to_string(A);
    return res;
}

CheckResult check_gradient_il(double tol, std::uint64_t seed) {
    CheckResult res;
    res.name = "gradient-il";
    TrainConfig cfg;
    cfg.chunk_len = 2;
    cfg.prefix_len = 1;
    cfg.flow_depth = 1;
    cfg.hidden = 2;
    cfg.heads = 1;
    cfg.sigma_noise = 0.0;  // deterministic loss for finite differences
    cfg.prefix_dropout = 0.0;
    cfg.seed = seed;
    FlowModel model(cfg, 2, 1);
    randomize_heads(model, 0.3, seed + 1);
    std::size_t n = model.params().count_values();
    if (n > 500) throw ArgumentError("check_gradient_il: model too large");

    Rng rng(seed + 2);
    Tensor obs = Tensor::randn(3, 1, 2, rng, 0.5);
    Tensor prefix = Tensor::randn(3, 1, 1, rng, 0.3);
    Tensor targets(3, 2, 1);
    for (auto& v : targets.data) v = rng.uniform(-0.8, 0.8);

    Rng dummy;
    auto loss_fn = [&]() {
        Tape tape(false);
        return tape.val(model.il_loss_t(tape, obs, prefix, targets, 0.0, dummy)).item();
    };
    auto backward_fn = [&]() {
        Tape tape;
        tape.backward(model.il_loss_t(tape, obs, prefix, targets, 0.0, dummy));
    };
    double worst = fd_max_rel(model.params().all(), loss_fn, backward_fn);
    res.pass = worst < tol;
    res.detail = "max_rel=" + fmt(worst) + " params=" + std::to_string(n);
    return res;
}

CheckResult check_gradient_critic(double tol, std::uint64_t seed) {
    CheckResult res;
    res.name = "gradient-critic";
    TrainConfig cfg;
    cfg.chunk_len = 2;
    cfg.prefix_len = 1;
    cfg.critic_hidden = 4;
    cfg.critic_heads = 1;
    cfg.critic_layers = 1;
    cfg.num_bins = 5;
    cfg.num_critics = 1;
    cfg.seed = seed;
    ValueSupport support = ValueSupport::make(-1.0, 1.0, cfg.num_bins, 0.75);
    CriticEnsemble ens(cfg, 2, 1, support);
    std::size_t n = ens.member(0).params().count_values();
    if (n > 500) throw ArgumentError("check_gradient_critic: model too large");

    Rng rng(seed + 2);
    TransitionBatch batch;
    batch.obs = Tensor::randn(3, 1, 2, rng, 0.5);
    batch.prefix = Tensor::randn(3, 1, 1, rng, 0.3);
    batch.chunk = Tensor::randn(3, 2, 1, rng, 0.3);
    batch.rewards = Tensor::zeros(3, 2, 1);
    batch.next_obs = batch.obs;
    batch.next_prefix = batch.prefix;
    batch.done.assign(3, 0.0);
    batch.offline.assign(3, 1);
    std::vector<double> y = {0.2, -0.4, 0.7};

    Rng dummy;
    auto loss_fn = [&]() {
        Tape tape(false);
        return tape.val(ens.critic_loss_t(tape, batch, y, 0.0, dummy)).item();
    };
    auto backward_fn = [&]() {
        Tape tape;
        tape.backward(ens.critic_loss_t(tape, batch, y, 0.0, dummy));
    };
    double worst = fd_max_rel(ens.member(0).params().all(), loss_fn, backward_fn);
    res.pass = worst < tol;
    res.detail = "max_rel=" + fmt(worst) + " params=" + std::to_string(n);
    return res;
}

CheckResult check_gradient_actor(double tol, std::uint64_t seed) {
    CheckResult res;
    res.name = "gradient-actor";
    TrainConfig cfg;
    cfg.chunk_len = 2;
    cfg.prefix_len = 1;
    cfg.flow_depth = 1;
    cfg.hidden = 2;
    cfg.heads = 1;
    cfg.critic_hidden = 4;
    cfg.critic_heads = 1;
    cfg.critic_layers = 1;
    cfg.num_bins = 5;
    cfg.num_critics = 2;
    cfg.lambda_bc = 0.1;
    cfg.seed = seed;
    FlowModel policy(cfg, 2, 1);
    randomize_heads(policy, 0.3, seed + 1);
    std::size_t n = policy.params().count_values();
    if (n > 500) throw ArgumentError("check_gradient_actor: model too large");
    ValueSupport support = ValueSupport::make(-1.0, 1.0, cfg.num_bins, 0.75);
    CriticEnsemble ens(cfg, 2, 1, support);

    Rng rng(seed + 2);
    Tensor obs = Tensor::randn(3, 1, 2, rng, 0.5);
    Tensor prefix = Tensor::randn(3, 1, 1, rng, 0.3);
    Tensor z0 = Tensor::randn(3, 2, 1, rng, 0.7);  // fixed base sample
    Tensor bc_chunk(3, 2, 1);
    for (auto& v : bc_chunk.data) v = rng.uniform(-0.8, 0.8);  // fixed perturbed target

    Rng dummy;
    auto build = [&](Tape& tape) {
        Var o = tape.constant(obs);
        Var p = tape.constant(prefix);
        Var ctx = policy.encode_context_t(tape, o, p);
        auto [a_pi, ld] = policy.inverse_t(tape, tape.constant(z0), ctx, 0.0, dummy);
        Var q = ens.min_q_t(tape, o, p, a_pi, 0.0, dummy);
        Var lp = policy.log_prob_t(tape, tape.constant(bc_chunk), ctx, 0.0, dummy);
        return tape.add(tape.scale(tape.mean_all(q), -1.0),
                        tape.scale(tape.mean_all(lp), -cfg.lambda_bc));
    };
    auto loss_fn = [&]() {
        Tape tape(false);
        return tape.val(build(tape)).item();
    };
    auto backward_fn = [&]() {
        Tape tape;
        tape.backward(build(tape));
    };
    double worst = fd_max_rel(policy.params().all(), loss_fn, backward_fn);
    res.pass = worst < tol;
    res.detail = "max_rel=" + fmt(worst) + " params=" + std::to_string(n);
    return res;
}

CheckResult check_hl_gauss(double tol_bin, double tol_mean) {
    CheckResult res;
    res.name = "hl-gauss";
    ValueSupport s = ValueSupport::make(-1.0, 2.0, 31, 0.75);
    double worst_bin = 0.0, worst_mean = 0.0;
    for (double y : {-0.9, -0.25, 0.0, 0.41, 1.0, 1.77}) {
        std::vector<double> probs = hl_gauss_project(y, s);
        std::vector<double> num(s.num_bins);
        double total = 0.0;
        for (int i = 0; i < s.num_bins; ++i) {
            num[i] = gauss_mass(s.edge(i), s.edge(i + 1), y, s.hl_sigma);
            total += num[i];
        }
        for (int i = 0; i < s.num_bins; ++i)
            worst_bin = std::max(worst_bin, std::abs(probs[i] - num[i] / total));
        if (y > s.v_min + 0.3 && y < s.v_max - 0.3)
            worst_mean = std::max(worst_mean, std::abs(scalar_q(probs, s) - y));
    }
    res.pass = worst_bin < tol_bin && worst_mean < tol_mean;
    res.detail = "max_bin_err=" + fmt(worst_bin) + " max_mean_err=" + fmt(worst_mean);
    return res;
}

CheckResult check_bellman_oracle(int H, double tol, int max_steps, std::uint64_t seed) {
    CheckResult res;
    res.name = "bellman-oracle";
    const double gamma = 0.9;
    TabularChunkMDP mdp;
    int C = 1;
    for (int t = 0; t < H; ++t) C *= TabularChunkMDP::kActions;

    // fixed deterministic chunk-per-state bootstrap policy
    std::vector<int> policy_chunk(TabularChunkMDP::kStates);
    for (int s = 0; s < TabularChunkMDP::kStates; ++s) policy_chunk[s] = (s * 7 + 3) % C;
    auto Q = dp_chunk_q(mdp, policy_chunk, gamma, H);
    {  // cross-check the linear solve against value iteration
        auto Qvi = dp_chunk_q_vi(mdp, policy_chunk, gamma, H);
        for (int s = 0; s < TabularChunkMDP::kStates; ++s)
            for (int c = 0; c < C; ++c)
                if (std::abs(Q[s][c] - Qvi[s][c]) > 1e-8)
                    throw DomainError("bellman oracle: DP solvers disagree");
    }

    auto chunk_coords = [&](int code) {
        std::vector<double> out;
        for (int u : chunk_actions(code, H)) {
            auto a = TabularChunkMDP::anchor(u);
            out.push_back(a[0]);
            out.push_back(a[1]);
        }
        return out;
    };

    // every (state, chunk) pair as a non-terminating transition
    ReplayBuffer data(TabularChunkMDP::kStates, 0, 2, H);
    double q_lo = 1e300, q_hi = -1e300;
    for (int s = 0; s < TabularChunkMDP::kStates; ++s)
        for (int c = 0; c < C; ++c) {
            TransitionChunk tc;
            tc.obs = TabularChunkMDP::one_hot(s);
            tc.chunk = chunk_coords(c);
            int cur = s;
            for (int u : chunk_actions(c, H)) {
                tc.rewards.push_back(mdp.reward(cur, u));
                cur = mdp.next_state(cur, u);
            }
            tc.next_obs = TabularChunkMDP::one_hot(cur);
            tc.done = false;
            data.append(tc);
            q_lo = std::min(q_lo, Q[s][c]);
            q_hi = std::max(q_hi, Q[s][c]);
        }

    TrainConfig cfg;
    cfg.chunk_len = H;
    cfg.prefix_len = 0;
    cfg.gamma = gamma;
    cfg.tau = 0.05;
    cfg.num_critics = 1;
    cfg.num_bins = 61;
    cfg.critic_hidden = 64;
    cfg.critic_heads = 2;
    cfg.critic_layers = 2;
    cfg.batch_rl = 64;
    cfg.seed = seed;
    double margin = 0.2 * std::max(q_hi - q_lo, 1.0);
    ValueSupport support =
        ValueSupport::make(q_lo - margin, q_hi + margin, cfg.num_bins, cfg.hl_sigma_ratio);
    CriticEnsemble ens(cfg, TabularChunkMDP::kStates, 2, support);

    auto bootstrap = [&](const Tensor& next_obs, const Tensor&, Rng&) {
        Tensor out(next_obs.b, H, 2);
        for (int i = 0; i < next_obs.b; ++i) {
            int s = 0;
            for (int k = 1; k < TabularChunkMDP::kStates; ++k)
                if (next_obs.at(i, 0, k) > next_obs.at(i, 0, s)) s = k;
            std::vector<double> coords = chunk_coords(policy_chunk[s]);
            for (int j = 0; j < H; ++j)
                for (int k = 0; k < 2; ++k) out.at(i, j, k) = coords[std::size_t(j) * 2 + k];
        }
        return out;
    };

    std::vector<std::size_t> all_idx(data.size());
    for (std::size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = i;
    TransitionBatch all = data.gather(all_idx);
    auto sup_error = [&]() {
        std::vector<double> q = ens.min_q(all.obs, all.prefix, all.chunk);
        double worst = 0.0;
        std::size_t r = 0;
        for (int s = 0; s < TabularChunkMDP::kStates; ++s)
            for (int c = 0; c < C; ++c, ++r) worst = std::max(worst, std::abs(q[r] - Q[s][c]));
        return worst;
    };

    AdamW opt;
    AdamWConfig oc{1e-3, 0.9, 0.999, 1e-8, 0.0, 1.0};
    auto params = ens.member(0).params().all();
    Rng rng(seed + 5);
    Rng dummy;
    int steps = 0;
    double err = sup_error();
    while (steps < max_steps && err > tol * 0.8) {
        TransitionBatch batch = data.sample(cfg.batch_rl, rng);
        std::vector<double> y = ens.td_targets(batch, bootstrap, rng);
        for (Param* p : params) p->zero_grad();
        Tape tape;
        tape.backward(ens.critic_loss_t(tape, batch, y, 0.0, dummy));
        opt.step(params, oc);
        ens.polyak_update(cfg.tau);
        ++steps;
        if (steps % 250 == 0) err = sup_error();
    }
    err = sup_error();
    res.pass = err < tol;
    res.detail = "H=" + std::to_string(H) + " sup_err=" + fmt(err) +
                 " steps=" + std::to_string(steps);
    return res;
}

CheckResult check_mixing_ratio(int rows, double rho, std::uint64_t seed) {
    CheckResult res;
    res.name = "mixing-ratio";
    ReplayBuffer off(1, 0, 1, 1), on(1, 0, 1, 1);
    auto mk = [](Source s) {
        TransitionChunk tc;
        tc.obs = {0.0};
        tc.chunk = {0.0};
        tc.rewards = {0.0};
        tc.next_obs = {0.0};
        tc.done = true;
        tc.source = s;
        return tc;
    };
    for (int i = 0; i < 8; ++i) off.append(mk(Source::demo));
    for (int i = 0; i < 8; ++i) on.append(mk(Source::online));

    MixedSampler mix(&off, &on, rho);
    Rng rng(seed);
    TransitionBatch b = mix.sample(rows, rng);
    long n_off = 0;
    for (int i = 0; i < rows; ++i) n_off += b.offline[i];
    double frac = double(n_off) / rows;
    double sigma = std::sqrt(rho * (1.0 - rho) / rows);
    res.pass = std::abs(frac - rho) < 3.0 * sigma;
    res.detail = "frac=" + fmt(frac) + " rho=" + fmt(rho) + " 3sigma=" + fmt(3.0 * sigma);
    return res;
}

std::vector<CheckResult> run_all(const std::string& filter) {
    struct Suite {
        std::string name;
        std::function<std::vector<CheckResult>()> run;
    };
    std::vector<Suite> suites = {
        {"round-trip", [] { return std::vector{check_round_trip(10, 4, 16, 64, 200, 1e-4, 1)}; }},
        {"jacobian", [] { return std::vector{check_jacobian(3, 2, 4, 1e-3, 2)}; }},
        {"normalization",
         [] {
             return std::vector{check_normalization(1, 0.02, 3), check_normalization(2, 0.02, 4)};
         }},
        {"gradient",
         [] {
             return std::vector{check_gradient_il(1e-3, 5), check_gradient_critic(1e-3, 6),
                                check_gradient_actor(1e-3, 7)};
         }},
        {"hl-gauss", [] { return std::vector{check_hl_gauss(1e-6, 1e-3)}; }},
        {"bellman-oracle", [] { return std::vector{check_bellman_oracle(1, 1e-2, 20000, 8)}; }},
        {"mixing-ratio", [] { return std::vector{check_mixing_ratio(100000, 0.5, 9)}; }},
    };
    std::vector<CheckResult> out;
    for (const auto& s : suites) {
        if (!filter.empty() && s.name.find(filter) == std::string::npos) continue;
        for (auto& r : s.run()) out.push_back(std::move(r));
    }
    return out;
}

}  // namespace flowrl::verify
