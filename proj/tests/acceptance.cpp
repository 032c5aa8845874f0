// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. The heavyweight criteria (6 and 7) train real models, so the whole
// run takes several minutes.
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "flowrl/env.hpp"
#include "flowrl/gaussian_head.hpp"
#include "flowrl/optim.hpp"
#include "flowrl/pipeline.hpp"
#include "flowrl/selector.hpp"
#include "flowrl/verify.hpp"

using namespace flowrl;

namespace {

int g_failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double now_sec() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

void criterion(int idx, const std::string& what, const std::vector<verify::CheckResult>& parts) {
    bool pass = true;
    std::string detail;
    for (const auto& r : parts) {
        pass = pass && r.pass;
        if (!detail.empty()) detail += " | ";
        detail += r.name + ": " + r.detail;
    }
    report("criterion-" + std::to_string(idx) + " " + what, pass, detail);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

// ---- criterion 6: multimodality on the two-mode bandit ----

RunConfig bandit_cfg(std::uint64_t seed) {
    RunConfig cfg;
    cfg.env = "bandit";
    TrainConfig& t = cfg.train;
    t.chunk_len = 1;
    t.prefix_len = 0;
    t.flow_depth = 6;
    t.hidden = 48;
    t.heads = 4;
    t.batch_il = 64;
    t.steps_il = 2500;
    t.lr_init = 3e-4;
    t.dropout_il = 0.1;
    t.seed = seed;
    return cfg;
}

struct ModeFractions {
    double plus = 0.0, minus = 0.0, strip = 0.0;
};

// classify raw bandit actions: each mode disc, plus the band covering both
// modes and the segment between them (where a collapsed unimodal fit lands)
ModeFractions mode_fractions(const std::vector<std::array<double, 2>>& actions) {
    ModeFractions f;
    for (const auto& a : actions) {
        bool p = MultimodalBandit::in_mode(a[0], a[1], 1);
        bool m = MultimodalBandit::in_mode(a[0], a[1], -1);
        f.plus += p;
        f.minus += m;
        bool between = std::abs(a[1]) <= MultimodalBandit::kModeRadius &&
                       std::abs(a[0]) <= MultimodalBandit::kModeX + MultimodalBandit::kModeRadius;
        f.strip += (p || m || between);
    }
    double n = double(actions.size());
    f.plus /= n;
    f.minus /= n;
    f.strip /= n;
    return f;
}

void run_criterion_6() {
    const int kSamples = 1000;
    bool pass = true;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        RunConfig cfg = bandit_cfg(seed);
        MultimodalBandit env;
        auto demos = gen_demos(env, 300, 0.0, 17 + seed);
        Pipeline pipe(cfg, env.obs_dim(), env.action_dim());
        pipe.load_dataset(demos);
        pipe.stage_il();

        // flow samples at the trained observation
        Tensor obs(1, 1, 2);
        std::vector<double> no = pipe.stats().apply_obs_vec(env.observe());
        std::copy(no.begin(), no.end(), obs.data.begin());
        Tensor prefix(1, 0, 2);
        ConditioningContext ctx = pipe.policy().encode_context(obs, prefix);
        Rng rng(seed * 1000 + 5);
        SampleResult sr = pipe.policy().sample(ctx, 1.0, kSamples, rng);
        std::vector<std::array<double, 2>> flow_actions(kSamples);
        for (int i = 0; i < kSamples; ++i)
            for (int k = 0; k < 2; ++k)
                flow_actions[i][k] = pipe.stats().unapply_action(sr.actions.at(i, 0, k), k);
        ModeFractions ff = mode_fractions(flow_actions);

        // diagonal-Gaussian ablation with the same data and budget
        GaussianHead gauss(cfg.train, env.obs_dim(), env.action_dim());
        AdamW opt;
        AdamWConfig oc{cfg.train.lr_init, 0.9, 0.999, 1e-8, cfg.train.weight_decay, 1.0};
        Rng trng(seed * 1000 + 6);
        for (std::int64_t i = 0; i < cfg.train.steps_il; ++i) {
            TransitionBatch batch = pipe.il_buffer().sample(cfg.train.batch_il, trng);
            gauss.params().zero_grads();
            Tape tape;
            tape.backward(gauss.il_loss_t(tape, batch.obs, batch.prefix, batch.chunk, trng));
            opt.step(gauss.params().all(), oc);
        }
        Tensor gs = gauss.sample(obs, prefix, 1.0, kSamples, trng);
        std::vector<std::array<double, 2>> gauss_actions(kSamples);
        for (int i = 0; i < kSamples; ++i)
            for (int k = 0; k < 2; ++k)
                gauss_actions[i][k] = pipe.stats().unapply_action(gs.at(i, 0, k), k);
        ModeFractions gf = mode_fractions(gauss_actions);

        bool seed_pass = ff.plus >= 0.30 && ff.minus >= 0.30 && gf.strip >= 0.90;
        pass = pass && seed_pass;
        if (!detail.empty()) detail += " ";
        detail += "s" + std::to_string(seed) + ":flow(" + fmt(ff.plus) + "," + fmt(ff.minus) +
                  ")/gauss-strip(" + fmt(gf.strip) + ")";
    }
    report("criterion-6 bimodal-imitation", pass,
           detail + " [flow >=0.30 per mode, gaussian >=0.90 collapsed]");
}

// ---- criterion 7: staged pipeline on the point-mass task ----

RunConfig pointmass_cfg(std::uint64_t seed) {
    RunConfig cfg;
    cfg.env = "pointmass";
    TrainConfig& t = cfg.train;
    t.chunk_len = 6;
    t.prefix_len = 2;
    t.flow_depth = 4;
    t.hidden = 32;
    t.heads = 4;
    t.critic_hidden = 48;
    t.critic_heads = 4;
    t.critic_layers = 1;
    t.num_bins = 51;
    t.batch_il = 64;
    t.batch_rl = 16;
    t.steps_il = 4000;
    t.steps_warmup = 2500;
    t.steps_offline = 400;
    t.online_iters = 6;
    t.online_episodes_per_iter = 10;
    t.steps_online_per_iter = 200;
    t.n_pi = 16;
    t.n_pi_rl = 8;
    t.dropout_il = 0.1;
    t.prefix_dropout = 0.25;
    t.seed = seed;
    return cfg;
}

void run_criterion_7() {
    const int kEvalEpisodes = 150;
    const int kSeeds = 4;
    double t0 = now_sec();

    ChunkedPointMass demo_env;
    auto demos = gen_demos(demo_env, 121, 0.41, 9);
    int successes = 0;
    for (const auto& ep : demos) successes += ep.success;

    double il = 0.0, sel = 0.0, off = 0.0, onl = 0.0;
    std::string per_seed;
    for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
        RunConfig cfg = pointmass_cfg(seed);
        Pipeline pipe(cfg, demo_env.obs_dim(), demo_env.action_dim());
        pipe.load_dataset(demos);
        ChunkedPointMass env;
        SelectionConfig plain{1, cfg.train.sigma_sample, false};
        SelectionConfig best{cfg.train.n_pi, cfg.train.sigma_sample, true};

        pipe.stage_il();
        double e_il = pipe.eval_policy(env, plain, kEvalEpisodes, 500 + seed).success_rate;
        pipe.stage_warmup();
        double e_sel = pipe.eval_policy(env, best, kEvalEpisodes, 500 + seed).success_rate;
        pipe.stage_offline();
        double e_off = pipe.eval_policy(env, best, kEvalEpisodes, 500 + seed).success_rate;
        pipe.stage_online(env);
        double e_onl = pipe.eval_policy(env, best, kEvalEpisodes, 500 + seed).success_rate;

        il += e_il / kSeeds;
        sel += e_sel / kSeeds;
        off += e_off / kSeeds;
        onl += e_onl / kSeeds;
        per_seed += " s" + std::to_string(seed) + ":" + fmt(e_il) + "/" + fmt(e_sel) + "/" +
                    fmt(e_off) + "/" + fmt(e_onl);
    }
    double mins = (now_sec() - t0) / 60.0;
    bool ordered = il <= sel + 1e-9 && sel <= off + 1e-9 && off <= onl + 1e-9;
    bool improved = onl >= il + 0.10;
    bool in_time = mins < 30.0;
    report("criterion-7 staged-pipeline", ordered && improved && in_time,
           "demos=" + std::to_string(demos.size()) + "(" + std::to_string(successes) +
               " ok) mean il/sel/off/onl=" + fmt(il) + "/" + fmt(sel) + "/" + fmt(off) + "/" +
               fmt(onl) + per_seed + " time=" + fmt(mins) + "min");
}

// ---- criterion 8: best-of-N selection ----

void run_criterion_8() {
    TrainConfig cfg;
    cfg.chunk_len = 4;
    cfg.prefix_len = 2;
    cfg.flow_depth = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.critic_hidden = 16;
    cfg.critic_heads = 2;
    cfg.critic_layers = 1;
    cfg.num_bins = 21;
    cfg.num_critics = 2;
    cfg.seed = 11;
    FlowModel policy(cfg, 3, 2);
    ValueSupport s = ValueSupport::make(-1.0, 1.0, cfg.num_bins, 0.75);
    CriticEnsemble ens(cfg, 3, 2, s);
    Tensor obs = Tensor::full(1, 1, 3, 0.3);
    Tensor prefix = Tensor::zeros(1, 2, 2);

    // identical rng stream per call makes the candidate sets nested
    bool monotone = true;
    double prev = -1e30, best16 = 0.0, base = 0.0;
    for (int n : {1, 2, 4, 8, 16}) {
        Rng rng(123);
        SelectionConfig sel{n, 0.7, true};
        double score = select_chunk(obs, prefix, policy, &ens, sel, rng).score;
        if (n > 1) monotone = monotone && score >= prev - 1e-12;
        if (n == 1) base = score;
        prev = score;
        best16 = score;
    }
    monotone = monotone && best16 >= base - 1e-12;

    // n=1 without a critic reproduces plain sampling exactly
    Rng r1(77), r2(77);
    SelectionConfig one{1, 0.7, false};
    SelectionResult res = select_chunk(obs, prefix, policy, nullptr, one, r1);
    SampleResult plainr = policy.sample(policy.encode_context(obs, prefix), 0.7, 1, r2);
    bool identical = res.chunk.data == plainr.actions.data;

    report("criterion-8 best-of-n", monotone && identical,
           std::string("nested-monotone=") + (monotone ? "yes" : "no") +
               " n1-equals-plain=" + (identical ? "yes" : "no"));
}

// ---- criterion 10: deterministic checkpoints and resume equivalence ----

RunConfig resume_cfg(const std::string& out_dir) {
    RunConfig cfg;
    cfg.env = "pointmass";
    cfg.out_dir = out_dir;
    TrainConfig& t = cfg.train;
    t.chunk_len = 4;
    t.prefix_len = 2;
    t.flow_depth = 2;
    t.hidden = 16;
    t.heads = 2;
    t.critic_hidden = 16;
    t.critic_heads = 2;
    t.critic_layers = 1;
    t.num_bins = 21;
    t.batch_il = 16;
    t.batch_rl = 8;
    t.steps_il = 80;
    t.steps_warmup = 40;
    t.steps_offline = 20;
    t.online_iters = 1;
    t.online_episodes_per_iter = 2;
    t.steps_online_per_iter = 8;
    t.n_pi = 8;
    t.n_pi_rl = 4;
    t.dropout_il = 0.1;
    t.seed = 21;
    return cfg;
}

bool params_equal(const ParamStore& a, const ParamStore& b) {
    auto pa = a.all();
    auto pb = b.all();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i]->value.data != pb[i]->value.data || pa[i]->m.data != pb[i]->m.data ||
            pa[i]->v.data != pb[i]->v.data)
            return false;
    return true;
}

std::string read_file(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) return {};
    std::string out;
    char buf[65536];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, f)) out.append(buf, n);
    std::fclose(f);
    return out;
}

void run_criterion_10() {
    namespace fs = std::filesystem;
    fs::path base = fs::temp_directory_path() / "flowrl_acceptance_resume";
    fs::remove_all(base);
    ChunkedPointMass env;
    auto demos = gen_demos(env, 12, 0.25, 31);

    // a: il + warmup in one process
    RunConfig cfg_a = resume_cfg((base / "a").string());
    cfg_a.stage_offline = cfg_a.stage_online = false;
    Pipeline a(cfg_a, 4, 2);
    a.run_full(&demos);

    // b: il alone, then a fresh pipeline resumes and runs warmup
    RunConfig cfg_b = resume_cfg((base / "b").string());
    cfg_b.stage_warmup = cfg_b.stage_offline = cfg_b.stage_online = false;
    Pipeline b1(cfg_b, 4, 2);
    b1.run_full(&demos);
    RunConfig cfg_b2 = cfg_b;
    cfg_b2.stage_warmup = true;
    Pipeline b2(cfg_b2, 4, 2);
    b2.run_full(&demos);

    bool resume_equal = params_equal(a.policy().params(), b2.policy().params());
    for (int j = 0; j < a.critics().num_members(); ++j) {
        resume_equal = resume_equal &&
                       params_equal(a.critics().member(j).params(),
                                    b2.critics().member(j).params()) &&
                       params_equal(a.critics().target(j).params(),
                                    b2.critics().target(j).params());
    }

    // byte-stable round trip: save -> load -> save produces identical files
    std::string p1 = (base / "ck1.ck").string(), p2 = (base / "ck2.ck").string();
    a.save_checkpoint(p1, "warmup");
    Pipeline c(cfg_a, 4, 2);
    c.load_checkpoint(p1);
    c.save_checkpoint(p2, "warmup");
    std::string f1 = read_file(p1), f2 = read_file(p2);
    bool byte_stable = !f1.empty() && f1 == f2;

    fs::remove_all(base);
    report("criterion-10 checkpoint-determinism", resume_equal && byte_stable,
           std::string("split-run-bitwise-equal=") + (resume_equal ? "yes" : "no") +
               " save-load-save-identical=" + (byte_stable ? "yes" : "no"));
}

}  // namespace

int main() {
    std::uint64_t seed = 7;

    criterion(1, "flow-round-trip", {verify::check_round_trip(10, 4, 16, 64, 1000, 1e-4, seed)});
    criterion(2, "exact-likelihood",
              {verify::check_jacobian(3, 2, 4, 1e-3, seed), verify::check_normalization(1, 0.02, seed),
               verify::check_normalization(2, 0.02, seed)});
    criterion(3, "loss-gradients",
              {verify::check_gradient_il(1e-3, seed), verify::check_gradient_critic(1e-3, seed),
               verify::check_gradient_actor(1e-3, seed)});
    criterion(4, "hl-gauss-projection", {verify::check_hl_gauss(1e-6, 1e-3)});
    criterion(5, "bellman-oracle",
              {verify::check_bellman_oracle(1, 1e-2, 20000, seed),
               verify::check_bellman_oracle(2, 1e-2, 20000, seed),
               verify::check_bellman_oracle(3, 1e-2, 20000, seed)});
    run_criterion_6();
    run_criterion_7();
    run_criterion_8();
    criterion(9, "replay-mixing", {verify::check_mixing_ratio(100000, 0.5, seed)});
    run_criterion_10();

    if (g_failures == 0) {
        std::printf("acceptance: all criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criterion(s) failed\n", g_failures);
    return 1;
}
